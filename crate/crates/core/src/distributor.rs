//! Task-distributor state machine driven by the simulated network.
//!
//! Each job runs one epoch: announce to every peer, collect task requests
//! for `announce_window` seconds, probe every responder with single-unit
//! known-answer tasks, classify the responders, then dispatch the job's
//! units to the PG1 peers until the job completes, its deadline passes, or
//! a unit runs out of retries. Jobs are served one at a time; an epoch
//! starts once the previous job has ended and its stragglers have drained.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::{AccessStats, DistanceError, DistanceTracker, TurnaroundRow, TurnaroundTable};
use crate::metrics::{computation_time, estimate_availability, CredibilityCounters, MetricsError, PeerSnapshot};
use crate::selection::{classify_population, CoarseClass, PeerGroup, PopulationAverages, SelectionError};
use crate::simnet::{simulate_batch, substream, AvailabilityTrack, PeerProfile, SimClock, SimError};
use crate::task_model::{
    is_successful, split_job, JobId, JobSpec, ModelError, PeerId, ResultKind, Seconds, TaskId, UnitId,
};

/// Endpoint name of the distributor in message traces.
pub const DISTRIBUTOR: &str = "distributor";

#[derive(Debug, Error)]
pub enum DistributorError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Distance(#[from] DistanceError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid distributor setting {field}: {reason}")]
    Setting { field: &'static str, reason: String },
}

/// Protocol knobs of the distributor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributorConfig {
    pub mu: f64,
    pub ewma_alpha: f64,
    pub probe_batches: u32,
    pub timeout_multiplier: f64,
    pub timeout_floor: Seconds,
    pub max_retries: u32,
    pub batch_size: u32,
    pub announce_window: Seconds,
    pub availability_epoch: Seconds,
    /// Control mode: dispatch to every responder instead of PG1 only.
    pub dispatch_to_all: bool,
}

impl Default for DistributorConfig {
    fn default() -> Self {
        Self {
            mu: crate::selection::DEFAULT_MU,
            ewma_alpha: crate::distance::DEFAULT_EWMA_ALPHA,
            probe_batches: 3,
            timeout_multiplier: 3.0,
            timeout_floor: 10.0,
            max_retries: 5,
            batch_size: 1,
            announce_window: 5.0,
            availability_epoch: 10.0,
            dispatch_to_all: false,
        }
    }
}

impl DistributorConfig {
    pub fn validate(&self) -> Result<(), DistributorError> {
        let bad = |field: &'static str, reason: &str| {
            Err(DistributorError::Setting {
                field,
                reason: reason.to_string(),
            })
        };
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return bad("mu", "must lie in (0, 1]");
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return bad("ewma_alpha", "must lie in (0, 1]");
        }
        if self.probe_batches == 0 {
            return bad("probe_batches", "must be at least 1");
        }
        if !(self.timeout_multiplier >= 1.0 && self.timeout_multiplier.is_finite()) {
            return bad("timeout_multiplier", "must be a finite value >= 1");
        }
        if !(self.timeout_floor > 0.0 && self.timeout_floor.is_finite()) {
            return bad("timeout_floor", "must be a positive finite value");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if !(self.announce_window > 0.0 && self.announce_window.is_finite()) {
            return bad("announce_window", "must be a positive finite value");
        }
        if !(self.availability_epoch > 0.0 && self.availability_epoch.is_finite()) {
            return bad("availability_epoch", "must be a positive finite value");
        }
        Ok(())
    }
}

/// Where the distributor's turnaround estimates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MeasurementMode {
    /// The distributor keeps its own TaskID and Turnaround-Time tables.
    #[default]
    Passive,
    /// No tables on the distributor; the simulator hands it the same
    /// estimates computed from its transport records. Used to show that
    /// measuring adds no traffic.
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Announcing,
    Probing,
    Classifying,
    Dispatching,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Announce,
    TaskRequest,
    Task,
    Probe,
    Result,
}

/// One message on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub send_time: Seconds,
    pub kind: MessageKind,
    pub from: String,
    pub to: String,
    pub job_id: JobId,
    pub task_id: Option<TaskId>,
    pub units: u32,
    pub result: Option<ResultKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobOutcome {
    Completed,
    DeadlineMissed,
    NoPeers,
    NoEfficientPeers,
    RetriesExhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRow {
    pub job_id: JobId,
    pub outcome: JobOutcome,
    pub start_time: Seconds,
    pub end_time: Seconds,
    /// Set only when every unit completed.
    pub finish_time: Option<Seconds>,
    pub met_deadline: bool,
    pub size: u32,
    pub completed_units: u32,
    pub responders: u32,
    pub dropped: u32,
    pub selected: u32,
}

/// One responder as seen in one epoch. Dropped responders (no measured
/// distance) carry no class or group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRow {
    pub peer_id: PeerId,
    pub credibility: Option<f64>,
    pub computation_time: Seconds,
    pub distance: Option<Seconds>,
    pub coarse: Option<CoarseClass>,
    pub group: Option<PeerGroup>,
    pub selected: bool,
    pub units_completed: u32,
    pub correct: u32,
    pub erroneous: u32,
    pub incomplete: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub job: JobRow,
    pub averages: Option<PopulationAverages>,
    pub peers: Vec<PeerRow>,
    /// Messages sent while this epoch was active.
    pub message_count: u64,
}

/// Everything a finished simulation produced.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub epochs: Vec<EpochReport>,
    pub trace: Vec<MessageRecord>,
    pub turnaround: Vec<TurnaroundRow>,
    pub access: AccessStats,
    pub orphan_results: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Tick {
    AnnounceClosed { job: usize },
    Deadline { job: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Delivery {
    Announce { job: usize, peer: usize },
    TaskRequest { job: usize, peer: usize },
    Result { task: TaskId },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SimEvent {
    JobArrival { job: usize },
    MessageDelivery(Delivery),
    ProcessingDone { task: TaskId },
    Timeout { task: TaskId },
    EpochTick(Tick),
}

struct PeerRuntime {
    profile: PeerProfile,
    track: AvailabilityTrack,
    batch_rng: ChaCha8Rng,
    busy: bool,
}

struct InFlight {
    peer: usize,
    job: usize,
    units: Vec<UnitState>,
    probe: bool,
}

/// Simulator-side record of a batch on the wire.
struct WireBatch {
    peer: usize,
    job: usize,
    send_time: Seconds,
    units: u32,
    kind: ResultKind,
}

#[derive(Debug, Clone)]
struct UnitState {
    id: UnitId,
    retries: u32,
    last_peer: Option<usize>,
}

#[derive(Default, Clone, Copy)]
struct EpochTally {
    correct: u32,
    erroneous: u32,
    incomplete: u32,
    units_completed: u32,
}

struct Epoch {
    job: usize,
    phase: Phase,
    start: Seconds,
    responders: BTreeSet<usize>,
    probes_left: BTreeMap<usize, u32>,
    tally: BTreeMap<usize, EpochTally>,
    rows: Vec<PeerRow>,
    averages: Option<PopulationAverages>,
    selected: Vec<usize>,
    pending: VecDeque<UnitState>,
    in_flight_units: u32,
    completed: BTreeSet<UnitId>,
    dropped: u32,
    messages_at_start: usize,
}

enum Distances {
    Passive(DistanceTracker),
    Disabled(TurnaroundTable),
}

/// Unit bookkeeping of the active job.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitCounts {
    pub pending: u32,
    pub in_flight: u32,
    pub completed: u32,
    pub size: u32,
}

pub struct Simulation {
    cfg: DistributorConfig,
    jobs: Vec<JobSpec>,
    peers: Vec<PeerRuntime>,
    peer_index: BTreeMap<PeerId, usize>,
    clock: SimClock<SimEvent>,
    distances: Distances,
    counters: Vec<CredibilityCounters>,
    wire: BTreeMap<TaskId, WireBatch>,
    in_flight: BTreeMap<TaskId, InFlight>,
    next_task: u64,
    queue: VecDeque<usize>,
    active: Option<Epoch>,
    trace: Vec<MessageRecord>,
    reports: Vec<EpochReport>,
    orphans: u64,
}

impl Simulation {
    pub fn new(
        cfg: DistributorConfig,
        peers: &[PeerProfile],
        jobs: &[JobSpec],
        seed: u64,
        mode: MeasurementMode,
    ) -> Result<Self, DistributorError> {
        cfg.validate()?;
        for j in jobs {
            j.validate()?;
        }
        let mut peer_index = BTreeMap::new();
        let mut runtimes = Vec::with_capacity(peers.len());
        for (i, p) in peers.iter().enumerate() {
            p.validate()?;
            if peer_index.insert(p.peer_id.clone(), i).is_some() {
                return Err(DistributorError::Setting {
                    field: "peers",
                    reason: format!("duplicate peer id {}", p.peer_id),
                });
            }
            runtimes.push(PeerRuntime {
                profile: p.clone(),
                track: AvailabilityTrack::new(&p.availability, cfg.availability_epoch, seed, &p.peer_id),
                batch_rng: substream(seed, &p.peer_id, "batch"),
                busy: false,
            });
        }
        let distances = match mode {
            MeasurementMode::Passive => Distances::Passive(DistanceTracker::new(cfg.ewma_alpha)?),
            MeasurementMode::Disabled => Distances::Disabled(TurnaroundTable::new(cfg.ewma_alpha)?),
        };
        let mut clock = SimClock::new(seed);
        for (i, j) in jobs.iter().enumerate() {
            clock.schedule(j.arrival_time.max(0.0), SimEvent::JobArrival { job: i })?;
        }
        Ok(Self {
            counters: vec![CredibilityCounters::default(); runtimes.len()],
            cfg,
            jobs: jobs.to_vec(),
            peers: runtimes,
            peer_index,
            clock,
            distances,
            wire: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            next_task: 0,
            queue: VecDeque::new(),
            active: None,
            trace: Vec::new(),
            reports: Vec::new(),
            orphans: 0,
        })
    }

    pub fn now(&self) -> Seconds {
        self.clock.now()
    }

    /// Phase of the active epoch; `Done` between jobs.
    pub fn phase(&self) -> Phase {
        self.active.as_ref().map_or(Phase::Done, |e| e.phase)
    }

    pub fn trace(&self) -> &[MessageRecord] {
        &self.trace
    }

    pub fn reports(&self) -> &[EpochReport] {
        &self.reports
    }

    /// Unit bookkeeping of the job currently being dispatched.
    pub fn unit_counts(&self) -> Option<UnitCounts> {
        let e = self.active.as_ref()?;
        Some(UnitCounts {
            pending: e.pending.len() as u32,
            in_flight: e.in_flight_units,
            completed: e.completed.len() as u32,
            size: self.jobs[e.job].size,
        })
    }

    /// Peers allowed to receive work in the active epoch.
    pub fn selected_peers(&self) -> Vec<PeerId> {
        self.active
            .as_ref()
            .map(|e| {
                e.selected
                    .iter()
                    .map(|&i| self.peers[i].profile.peer_id.clone())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn access_stats(&self) -> AccessStats {
        match &self.distances {
            Distances::Passive(t) => t.stats(),
            Distances::Disabled(_) => AccessStats::default(),
        }
    }

    pub fn counters(&self, peer: &PeerId) -> Option<CredibilityCounters> {
        self.peer_index.get(peer).map(|&i| self.counters[i])
    }

    pub fn distance(&self, peer: &PeerId) -> Option<Seconds> {
        self.peer_index.get(peer).and_then(|&i| self.distance_of(i))
    }

    /// Processes one event. Returns `false` once nothing is left to do.
    pub fn step(&mut self) -> Result<bool, DistributorError> {
        let Some(event) = self.clock.step() else {
            return Ok(false);
        };
        match event.payload {
            SimEvent::JobArrival { job } => {
                self.queue.push_back(job);
                self.try_start_next()?;
            }
            SimEvent::MessageDelivery(Delivery::Announce { job, peer }) => self.on_announce(job, peer)?,
            SimEvent::MessageDelivery(Delivery::TaskRequest { job, peer }) => self.on_task_request(job, peer),
            SimEvent::MessageDelivery(Delivery::Result { task }) => self.on_result(task)?,
            SimEvent::ProcessingDone { task } => self.on_processing_done(task),
            SimEvent::Timeout { task } => self.on_timeout(task)?,
            SimEvent::EpochTick(Tick::AnnounceClosed { job }) => self.on_announce_closed(job)?,
            SimEvent::EpochTick(Tick::Deadline { job }) => self.on_deadline(job)?,
        }
        Ok(true)
    }

    pub fn run(mut self) -> Result<SimulationOutput, DistributorError> {
        while self.step()? {}
        Ok(self.finish())
    }

    pub fn finish(self) -> SimulationOutput {
        let (turnaround, access) = match &self.distances {
            Distances::Passive(t) => (t.turnaround().rows(), t.stats()),
            Distances::Disabled(t) => (t.rows(), AccessStats::default()),
        };
        SimulationOutput {
            epochs: self.reports,
            trace: self.trace,
            turnaround,
            access,
            orphan_results: self.orphans,
        }
    }

    fn peer_name(&self, peer: usize) -> String {
        self.peers[peer].profile.peer_id.0.clone()
    }

    #[allow(clippy::too_many_arguments)]
    fn send(
        &mut self,
        kind: MessageKind,
        from: String,
        to: String,
        job: usize,
        task_id: Option<TaskId>,
        units: u32,
        result: Option<ResultKind>,
    ) {
        self.trace.push(MessageRecord {
            send_time: self.clock.now(),
            kind,
            from,
            to,
            job_id: self.jobs[job].job_id.clone(),
            task_id,
            units,
            result,
        });
    }

    fn distance_of(&self, peer: usize) -> Option<Seconds> {
        let id = &self.peers[peer].profile.peer_id;
        match &self.distances {
            Distances::Passive(t) => t.lookup_distance(id),
            Distances::Disabled(t) => t.lookup(id),
        }
    }

    fn timeout_for(&self, peer: usize, units: u32) -> Seconds {
        match self.distance_of(peer) {
            Some(d) => (self.cfg.timeout_multiplier * d * f64::from(units)).max(self.cfg.timeout_floor),
            None => self.cfg.timeout_floor,
        }
    }

    fn try_start_next(&mut self) -> Result<(), DistributorError> {
        if self.active.is_some() || !self.in_flight.is_empty() {
            return Ok(());
        }
        let Some(job) = self.queue.pop_front() else {
            return Ok(());
        };
        self.announce(job)
    }

    /// Starts an epoch: one availability message to every peer.
    fn announce(&mut self, job: usize) -> Result<(), DistributorError> {
        let now = self.clock.now();
        self.active = Some(Epoch {
            job,
            phase: Phase::Announcing,
            start: now,
            responders: BTreeSet::new(),
            probes_left: BTreeMap::new(),
            tally: BTreeMap::new(),
            rows: Vec::new(),
            averages: None,
            selected: Vec::new(),
            pending: VecDeque::new(),
            in_flight_units: 0,
            completed: BTreeSet::new(),
            dropped: 0,
            messages_at_start: self.trace.len(),
        });
        if self.jobs[job].deadline < now {
            return self.finalize(JobOutcome::DeadlineMissed);
        }
        for peer in 0..self.peers.len() {
            self.send(
                MessageKind::Announce,
                DISTRIBUTOR.into(),
                self.peer_name(peer),
                job,
                None,
                0,
                None,
            );
            let at = now + self.peers[peer].profile.one_way_latency;
            self.clock
                .schedule(at, SimEvent::MessageDelivery(Delivery::Announce { job, peer }))?;
        }
        self.clock.schedule(
            now + self.cfg.announce_window,
            SimEvent::EpochTick(Tick::AnnounceClosed { job }),
        )?;
        self.clock
            .schedule(self.jobs[job].deadline, SimEvent::EpochTick(Tick::Deadline { job }))?;
        Ok(())
    }

    fn on_announce(&mut self, job: usize, peer: usize) -> Result<(), DistributorError> {
        let now = self.clock.now();
        if !self.peers[peer].track.is_up(now) {
            return Ok(());
        }
        self.send(
            MessageKind::TaskRequest,
            self.peer_name(peer),
            DISTRIBUTOR.into(),
            job,
            None,
            0,
            None,
        );
        let at = now + self.peers[peer].profile.one_way_latency;
        self.clock
            .schedule(at, SimEvent::MessageDelivery(Delivery::TaskRequest { job, peer }))?;
        Ok(())
    }

    fn on_task_request(&mut self, job: usize, peer: usize) {
        if let Some(e) = self.active.as_mut() {
            if e.job == job && e.phase == Phase::Announcing {
                e.responders.insert(peer);
            }
        }
    }

    fn on_announce_closed(&mut self, job: usize) -> Result<(), DistributorError> {
        match &self.active {
            Some(e) if e.job == job && e.phase == Phase::Announcing => {}
            _ => return Ok(()),
        }
        self.probe()
    }

    /// Sends the first known-answer unit to every responder.
    fn probe(&mut self) -> Result<(), DistributorError> {
        let e = self.active.as_mut().expect("active epoch");
        if e.responders.is_empty() {
            return self.finalize(JobOutcome::NoPeers);
        }
        e.phase = Phase::Probing;
        let responders: Vec<usize> = e.responders.iter().copied().collect();
        for &p in &responders {
            e.probes_left.insert(p, self.cfg.probe_batches);
            e.tally.insert(p, EpochTally::default());
        }
        for p in responders {
            self.send_probe(p)?;
        }
        Ok(())
    }

    fn send_probe(&mut self, peer: usize) -> Result<(), DistributorError> {
        let e = self.active.as_mut().expect("active epoch");
        let left = e.probes_left.get_mut(&peer).expect("probed peer");
        *left -= 1;
        let job = e.job;
        let unit = UnitState {
            id: UnitId(format!("probe:{}:{}", self.jobs[job].job_id, peer)),
            retries: 0,
            last_peer: None,
        };
        self.dispatch(peer, job, vec![unit], true)
    }

    fn dispatch(
        &mut self,
        peer: usize,
        job: usize,
        units: Vec<UnitState>,
        probe: bool,
    ) -> Result<(), DistributorError> {
        let now = self.clock.now();
        self.next_task += 1;
        let task = TaskId(self.next_task);
        let n = units.len() as u32;
        if let Distances::Passive(t) = &mut self.distances {
            t.record_dispatch(task, self.peers[peer].profile.peer_id.clone(), n, now)?;
        }
        let kind = if probe { MessageKind::Probe } else { MessageKind::Task };
        self.send(kind, DISTRIBUTOR.into(), self.peer_name(peer), job, Some(task), n, None);

        let runtime = &mut self.peers[peer];
        runtime.busy = true;
        let outcome = simulate_batch(&runtime.profile, &mut runtime.track, n, now, &mut runtime.batch_rng);
        if let Some(reply) = outcome.reply_time {
            let sent = (reply - runtime.profile.one_way_latency).max(now);
            self.clock.schedule(sent, SimEvent::ProcessingDone { task })?;
            self.clock
                .schedule(reply, SimEvent::MessageDelivery(Delivery::Result { task }))?;
        }
        self.wire.insert(
            task,
            WireBatch {
                peer,
                job,
                send_time: now,
                units: n,
                kind: outcome.kind,
            },
        );
        let timeout = now + self.timeout_for(peer, n);
        self.clock.schedule(timeout, SimEvent::Timeout { task })?;
        if !probe {
            if let Some(e) = self.active.as_mut() {
                e.in_flight_units += n;
            }
        }
        self.in_flight.insert(
            task,
            InFlight {
                peer,
                job,
                units,
                probe,
            },
        );
        Ok(())
    }

    fn on_processing_done(&mut self, task: TaskId) {
        let Some(w) = self.wire.get(&task) else { return };
        let (peer, job, units, kind) = (w.peer, w.job, w.units, w.kind);
        self.send(
            MessageKind::Result,
            self.peer_name(peer),
            DISTRIBUTOR.into(),
            job,
            Some(task),
            units,
            Some(kind),
        );
    }

    fn on_result(&mut self, task: TaskId) -> Result<(), DistributorError> {
        let now = self.clock.now();
        let wire = self.wire.remove(&task);
        let Some(flight) = self.in_flight.remove(&task) else {
            // Already resolved by a timeout.
            self.orphans += 1;
            if let Distances::Passive(t) = &mut self.distances {
                let _ = t.record_result(task, now);
            }
            return Ok(());
        };
        let wire = wire.expect("in-flight batch is on the wire");
        match &mut self.distances {
            Distances::Passive(t) => {
                t.record_result(task, now)?;
            }
            Distances::Disabled(t) => {
                let sample = (now - wire.send_time) / f64::from(wire.units);
                t.update(&self.peers[wire.peer].profile.peer_id, sample);
            }
        }
        self.resolve(flight, wire.kind)
    }

    fn on_timeout(&mut self, task: TaskId) -> Result<(), DistributorError> {
        let Some(flight) = self.in_flight.remove(&task) else {
            return Ok(());
        };
        if let Distances::Passive(t) = &mut self.distances {
            t.resolve_timeout(task)?;
        }
        self.resolve(flight, ResultKind::Incomplete)
    }

    /// Common handling once a batch is settled as `kind`.
    fn resolve(&mut self, flight: InFlight, kind: ResultKind) -> Result<(), DistributorError> {
        let peer = flight.peer;
        self.peers[peer].busy = false;
        self.counters[peer].record(kind);

        let current = matches!(&self.active, Some(e) if e.job == flight.job);
        if !current {
            // Straggler from an earlier job: counted, but its units are moot.
            return self.try_start_next();
        }
        let e = self.active.as_mut().expect("active epoch");
        let tally = e.tally.entry(peer).or_default();
        match kind {
            ResultKind::Correct => tally.correct += 1,
            ResultKind::Erroneous => tally.erroneous += 1,
            ResultKind::Incomplete => tally.incomplete += 1,
        }

        if flight.probe {
            if e.phase != Phase::Probing {
                return Ok(());
            }
            if e.probes_left.get(&peer).copied().unwrap_or(0) > 0 {
                return self.send_probe(peer);
            }
            e.probes_left.remove(&peer);
            if e.probes_left.is_empty() {
                return self.classify_and_select();
            }
            return Ok(());
        }

        let n = flight.units.len() as u32;
        e.in_flight_units -= n;
        if kind == ResultKind::Correct {
            e.completed.extend(flight.units.into_iter().map(|u| u.id));
            e.tally.entry(peer).or_default().units_completed += n;
            if e.completed.len() == self.jobs[e.job].size as usize {
                return self.finalize(JobOutcome::Completed);
            }
        } else {
            for mut unit in flight.units.into_iter().rev() {
                if unit.retries >= self.cfg.max_retries {
                    e.pending.push_front(unit);
                    return self.finalize(JobOutcome::RetriesExhausted);
                }
                unit.retries += 1;
                unit.last_peer = Some(peer);
                e.pending.push_front(unit);
            }
        }
        self.dispatch_loop()
    }

    /// Scores every responder, splits them into PG1..PG4 and, if PG1 is
    /// non-empty, starts dispatching the job.
    fn classify_and_select(&mut self) -> Result<(), DistributorError> {
        let now = self.clock.now();
        let e = self.active.as_mut().expect("active epoch");
        e.phase = Phase::Classifying;
        let (job, start) = (e.job, e.start);
        let responders: Vec<usize> = e.responders.iter().copied().collect();

        let mut snapshots = Vec::new();
        let mut pct = BTreeMap::new();
        for &p in &responders {
            let id = self.peers[p].profile.peer_id.clone();
            let up = self.peers[p].track.up_intervals_within(start, now);
            let obs = estimate_availability(&up, (start, now))?;
            pct.insert(p, computation_time(&obs));
            let snap = PeerSnapshot {
                peer_id: id,
                credibility: self.counters[p].credibility(),
                computation_time: pct[&p],
                distance: self.distance_of(p),
            };
            if snap.is_measured() {
                snapshots.push(snap);
            }
        }
        let (averages, classes) = classify_population(&snapshots, self.cfg.mu)?;
        let by_id: BTreeMap<&PeerId, _> = classes.iter().map(|c| (&c.peer_id, c)).collect();

        let mut rows: Vec<PeerRow> = responders
            .iter()
            .map(|&p| {
                let id = &self.peers[p].profile.peer_id;
                let class = by_id.get(id);
                PeerRow {
                    peer_id: id.clone(),
                    credibility: self.counters[p].credibility(),
                    computation_time: pct[&p],
                    distance: self.distance_of(p),
                    coarse: class.map(|c| c.coarse),
                    group: class.map(|c| c.group),
                    selected: false,
                    units_completed: 0,
                    correct: 0,
                    erroneous: 0,
                    incomplete: 0,
                }
            })
            .collect();
        let selected: Vec<usize> = responders
            .iter()
            .copied()
            .filter(|&p| {
                self.cfg.dispatch_to_all || by_id.get(&self.peers[p].profile.peer_id).is_some_and(|c| c.selected())
            })
            .collect();
        for (row, p) in rows.iter_mut().zip(&responders) {
            row.selected = selected.contains(p);
        }
        let e = self.active.as_mut().expect("active epoch");
        e.averages = averages;
        e.dropped = (responders.len() - snapshots.len()) as u32;
        e.rows = rows;
        e.selected = selected;
        if e.selected.is_empty() {
            return self.finalize(JobOutcome::NoEfficientPeers);
        }
        e.phase = Phase::Dispatching;
        e.pending = split_job(&self.jobs[job])?
            .into_iter()
            .map(|u| UnitState {
                id: u.unit_id,
                retries: 0,
                last_peer: None,
            })
            .collect();
        self.dispatch_loop()
    }

    /// Hands pending units to idle selected peers, nearest first.
    fn dispatch_loop(&mut self) -> Result<(), DistributorError> {
        loop {
            let e = self.active.as_ref().expect("active epoch");
            if e.phase != Phase::Dispatching {
                return Ok(());
            }
            let Some(front) = e.pending.front() else {
                return Ok(());
            };
            let idle: Vec<usize> = e.selected.iter().copied().filter(|&p| !self.peers[p].busy).collect();
            if idle.is_empty() {
                return Ok(());
            }
            let avoid = front.last_peer.filter(|_| idle.len() > 1);
            let peer = idle
                .iter()
                .copied()
                .filter(|&p| Some(p) != avoid)
                .min_by(|&a, &b| {
                    let da = self.distance_of(a).unwrap_or(f64::INFINITY);
                    let db = self.distance_of(b).unwrap_or(f64::INFINITY);
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .expect("at least one idle peer");
            let job = e.job;
            let take = (self.cfg.batch_size as usize).min(e.pending.len());
            let e = self.active.as_mut().expect("active epoch");
            let units: Vec<UnitState> = e.pending.drain(..take).collect();
            self.dispatch(peer, job, units, false)?;
        }
    }

    fn on_deadline(&mut self, job: usize) -> Result<(), DistributorError> {
        match &self.active {
            Some(e) if e.job == job => {}
            _ => return Ok(()),
        }
        // Let everything else due at this instant run first: finishing
        // exactly on the deadline still counts.
        if self.clock.peek_time() == Some(self.clock.now()) {
            self.clock
                .schedule(self.clock.now(), SimEvent::EpochTick(Tick::Deadline { job }))?;
            return Ok(());
        }
        self.finalize(JobOutcome::DeadlineMissed)
    }

    fn finalize(&mut self, outcome: JobOutcome) -> Result<(), DistributorError> {
        let now = self.clock.now();
        let mut e = self.active.take().expect("active epoch");
        let spec = &self.jobs[e.job];
        let finish_time = (outcome == JobOutcome::Completed).then_some(now);
        let met_deadline = finish_time.is_some_and(|t| is_successful(spec, t));
        for row in &mut e.rows {
            let p = self.peer_index[&row.peer_id];
            let t = e.tally.get(&p).copied().unwrap_or_default();
            row.units_completed = t.units_completed;
            row.correct = t.correct;
            row.erroneous = t.erroneous;
            row.incomplete = t.incomplete;
        }
        self.reports.push(EpochReport {
            job: JobRow {
                job_id: spec.job_id.clone(),
                outcome,
                start_time: e.start,
                end_time: now,
                finish_time,
                met_deadline,
                size: spec.size,
                completed_units: e.completed.len() as u32,
                responders: e.responders.len() as u32,
                dropped: e.dropped,
                selected: e.selected.len() as u32,
            },
            averages: e.averages,
            peers: e.rows,
            message_count: (self.trace.len() - e.messages_at_start) as u64,
        });
        self.try_start_next()
    }
}

/// Runs a whole scenario to completion.
pub fn simulate(
    cfg: &DistributorConfig,
    peers: &[PeerProfile],
    jobs: &[JobSpec],
    seed: u64,
    mode: MeasurementMode,
) -> Result<SimulationOutput, DistributorError> {
    Simulation::new(cfg.clone(), peers, jobs, seed, mode)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::AvailabilitySpec;

    fn job(size: u32, deadline: f64) -> JobSpec {
        JobSpec {
            job_id: JobId::new("j"),
            arrival_time: 0.0,
            deadline,
            size,
            unit_size: 1.0,
        }
    }

    fn cfg() -> DistributorConfig {
        DistributorConfig {
            announce_window: 1.0,
            ..DistributorConfig::default()
        }
    }

    #[test]
    fn all_up_peers_respond() {
        let peers: Vec<_> = (0..4)
            .map(|i| PeerProfile::perfect(format!("p{i}"), 0.1, 1.0))
            .collect();
        let out = simulate(&cfg(), &peers, &[job(10, 100.0)], 1, MeasurementMode::Passive).unwrap();
        assert_eq!(out.epochs[0].job.responders, 4);
    }

    #[test]
    fn down_peers_excluded_from_candidates() {
        let mut peers: Vec<_> = (0..10)
            .map(|i| PeerProfile::perfect(format!("p{i}"), 0.1, 1.0))
            .collect();
        for p in peers.iter_mut().take(3) {
            p.availability = AvailabilitySpec::Schedule(vec![(50.0, 1000.0)]);
        }
        let out = simulate(&cfg(), &peers, &[job(20, 200.0)], 1, MeasurementMode::Passive).unwrap();
        let r = &out.epochs[0];
        assert_eq!(r.job.responders, 7);
        assert!(r
            .peers
            .iter()
            .all(|row| !["p0", "p1", "p2"].contains(&row.peer_id.as_str())));
    }

    #[test]
    fn no_responders_is_reported() {
        let mut p = PeerProfile::perfect("p", 0.1, 1.0);
        p.availability = AvailabilitySpec::Fraction(0.0);
        let out = simulate(&cfg(), &[p], &[job(3, 100.0)], 1, MeasurementMode::Passive).unwrap();
        assert_eq!(out.epochs[0].job.outcome, JobOutcome::NoPeers);
    }

    #[test]
    fn perfect_peer_probe_values() {
        let p = PeerProfile::perfect("p", 0.1, 1.0);
        let mut sim = Simulation::new(cfg(), &[p], &[job(5, 100.0)], 1, MeasurementMode::Passive).unwrap();
        while sim.phase() != Phase::Dispatching {
            assert!(sim.step().unwrap());
        }
        let id = PeerId::new("p");
        assert_eq!(sim.counters(&id).unwrap(), CredibilityCounters::new(3, 0, 0));
        assert!((sim.distance(&id).unwrap() - 1.2).abs() < 1e-9);
        assert_eq!(sim.selected_peers(), vec![id]);
    }

    #[test]
    fn abandoning_peer_dropped_and_erroneous_peer_retained() {
        let mut quitter = PeerProfile::perfect("quitter", 0.1, 1.0);
        quitter.abandon_probability = 1.0;
        let mut liar = PeerProfile::perfect("liar", 0.1, 1.0);
        liar.error_probability = 1.0;
        let good = PeerProfile::perfect("good", 0.1, 1.0);
        let out = simulate(
            &cfg(),
            &[quitter, liar, good],
            &[job(5, 500.0)],
            1,
            MeasurementMode::Passive,
        )
        .unwrap();
        let r = &out.epochs[0];
        assert_eq!(r.job.dropped, 1);
        let row = |id: &str| r.peers.iter().find(|p| p.peer_id.as_str() == id).unwrap().clone();
        assert_eq!(row("quitter").incomplete, 3);
        assert_eq!(row("quitter").group, None);
        assert_eq!(row("liar").credibility, Some(0.0));
        assert!(row("liar").group.is_some());
        assert_eq!(r.job.outcome, JobOutcome::Completed);
    }

    #[test]
    fn single_responder_selected_iff_credible() {
        let p = PeerProfile::perfect("p", 0.1, 1.0);
        let out = simulate(
            &cfg(),
            std::slice::from_ref(&p),
            &[job(2, 100.0)],
            1,
            MeasurementMode::Passive,
        )
        .unwrap();
        assert_eq!(out.epochs[0].job.selected, 1);

        let mut bad = p;
        bad.error_probability = 1.0;
        let out = simulate(&cfg(), &[bad], &[job(2, 100.0)], 1, MeasurementMode::Passive).unwrap();
        assert_eq!(out.epochs[0].job.outcome, JobOutcome::NoEfficientPeers);
    }

    #[test]
    fn single_unit_meets_deadline_with_exact_finish() {
        let p = PeerProfile::perfect("p", 0.1, 1.0);
        let mut c = cfg();
        c.probe_batches = 1;
        let out = simulate(&c, &[p], &[job(1, 10.0)], 1, MeasurementMode::Passive).unwrap();
        let r = &out.epochs[0].job;
        assert!(r.met_deadline);
        // announce window 1.0, one probe 1.2, then one unit 1.2
        assert!((r.finish_time.unwrap() - 3.4).abs() < 1e-9);
    }

    #[test]
    fn unreachable_deadline_is_missed() {
        let p = PeerProfile::perfect("p", 0.1, 1.0);
        let mut j = job(1, 0.5);
        j.arrival_time = 0.0;
        let out = simulate(&cfg(), &[p], &[j], 1, MeasurementMode::Passive).unwrap();
        let r = &out.epochs[0].job;
        assert!(!r.met_deadline);
        assert_eq!(r.outcome, JobOutcome::DeadlineMissed);
    }

    #[test]
    fn always_abandoning_selected_peer_exhausts_retries() {
        // Reliable during probes, then leaves for good.
        let mut p = PeerProfile::perfect("p", 0.1, 1.0);
        p.availability = AvailabilitySpec::Schedule(vec![(0.0, 5.0)]);
        let out = simulate(&cfg(), &[p], &[job(3, 10_000.0)], 1, MeasurementMode::Passive).unwrap();
        let r = &out.epochs[0].job;
        assert_eq!(r.outcome, JobOutcome::RetriesExhausted);
        assert!(!r.met_deadline);
        assert_eq!(r.completed_units, 0);
    }

    #[test]
    fn unit_conservation_every_event() {
        let mut peers: Vec<_> = (0..6)
            .map(|i| PeerProfile::perfect(format!("p{i}"), 0.05 * f64::from(i), 0.5))
            .collect();
        peers[1].error_probability = 0.3;
        peers[2].abandon_probability = 0.2;
        peers[3].availability = AvailabilitySpec::Fraction(0.7);
        let mut c = cfg();
        c.mu = 0.5;
        c.batch_size = 2;
        let mut sim = Simulation::new(c, &peers, &[job(40, 500.0)], 11, MeasurementMode::Passive).unwrap();
        while sim.step().unwrap() {
            if let Some(u) = sim.unit_counts() {
                if sim.phase() == Phase::Dispatching {
                    assert_eq!(u.pending + u.in_flight + u.completed, u.size);
                }
            }
            let s = sim.access_stats();
            assert_eq!(s.result_accesses, 3 * s.results_processed);
        }
        let out = sim.finish();
        let r = &out.epochs[0];
        let by_peer: u32 = r.peers.iter().map(|p| p.units_completed).sum();
        assert_eq!(by_peer, r.job.completed_units);
    }

    #[test]
    fn replay_is_identical() {
        let mut peers: Vec<_> = (0..5)
            .map(|i| PeerProfile::perfect(format!("p{i}"), 0.1, 0.3 * f64::from(i + 1)))
            .collect();
        peers[0].error_probability = 0.4;
        peers[4].availability = AvailabilitySpec::Fraction(0.6);
        let a = simulate(&cfg(), &peers, &[job(30, 300.0)], 5, MeasurementMode::Passive).unwrap();
        let b = simulate(&cfg(), &peers, &[job(30, 300.0)], 5, MeasurementMode::Passive).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.epochs, b.epochs);
    }

    #[test]
    fn bad_settings_rejected() {
        let c = DistributorConfig {
            mu: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            c.validate(),
            Err(DistributorError::Setting { field: "mu", .. })
        ));
        let dup = [PeerProfile::perfect("a", 0.0, 1.0), PeerProfile::perfect("a", 0.0, 1.0)];
        assert!(Simulation::new(DistributorConfig::default(), &dup, &[], 0, MeasurementMode::Passive).is_err());
    }
}
