//! Deterministic discrete-event environment the distributor runs in.
//!
//! Time is real-valued seconds. Events are ordered by `(fire_time, seq)`
//! so simultaneous events fire in the order they were scheduled. All
//! randomness comes from per-peer ChaCha streams keyed on
//! `(seed, peer_id, purpose)`, so adding a peer never shifts another
//! peer's draws.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task_model::{PeerId, ResultKind, Seconds};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("event at {fire_time} is in the past (now = {now})")]
    PastEvent { now: Seconds, fire_time: Seconds },
    #[error("peer {peer}: {field} {reason}")]
    BadProfile {
        peer: PeerId,
        field: &'static str,
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<P> {
    pub fire_time: Seconds,
    pub seq: u64,
    pub payload: P,
}

struct Pending<P>(Event<P>);

impl<P> PartialEq for Pending<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Pending<P> {}

impl<P> PartialOrd for Pending<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Pending<P> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .fire_time
            .total_cmp(&self.0.fire_time)
            .then_with(|| other.0.seq.cmp(&self.0.seq))
    }
}

/// Simulated clock plus pending-event queue.
pub struct SimClock<P> {
    now: Seconds,
    next_seq: u64,
    queue: BinaryHeap<Pending<P>>,
    seed: u64,
}

impl<P> SimClock<P> {
    pub fn new(seed: u64) -> Self {
        Self {
            now: 0.0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            seed,
        }
    }

    pub fn now(&self) -> Seconds {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn peek_time(&self) -> Option<Seconds> {
        self.queue.peek().map(|p| p.0.fire_time)
    }

    /// Enqueues `payload` to fire at `fire_time`; returns its sequence number.
    pub fn schedule(&mut self, fire_time: Seconds, payload: P) -> Result<u64, SimError> {
        if !(fire_time >= self.now) || !fire_time.is_finite() {
            return Err(SimError::PastEvent {
                now: self.now,
                fire_time,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Pending(Event {
            fire_time,
            seq,
            payload,
        }));
        Ok(seq)
    }

    /// Pops the earliest event and advances the clock to it. `None` once
    /// the queue is exhausted.
    pub fn step(&mut self) -> Option<Event<P>> {
        let Pending(event) = self.queue.pop()?;
        self.now = event.fire_time;
        Some(event)
    }
}

/// Ground-truth availability of a peer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AvailabilitySpec {
    /// Explicit up-intervals `[start, end]`; down everywhere else.
    Schedule(Vec<(Seconds, Seconds)>),
    /// Each availability epoch is independently up with this probability.
    Fraction(f64),
}

impl Default for AvailabilitySpec {
    fn default() -> Self {
        AvailabilitySpec::Fraction(1.0)
    }
}

/// Simulated ground-truth behaviour of one task processor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerProfile {
    pub peer_id: PeerId,
    pub processing_seconds_per_unit: Seconds,
    pub one_way_latency: Seconds,
    #[serde(default)]
    pub serialization_delay_per_unit: Seconds,
    #[serde(default)]
    pub availability: AvailabilitySpec,
    #[serde(default)]
    pub error_probability: f64,
    #[serde(default)]
    pub abandon_probability: f64,
    #[serde(default = "default_load")]
    pub local_load_factor: f64,
}

fn default_load() -> f64 {
    1.0
}

impl PeerProfile {
    /// An always-up, failure-free peer.
    pub fn perfect(peer_id: impl Into<String>, latency: Seconds, processing: Seconds) -> Self {
        Self {
            peer_id: PeerId::new(peer_id),
            processing_seconds_per_unit: processing,
            one_way_latency: latency,
            serialization_delay_per_unit: 0.0,
            availability: AvailabilitySpec::Fraction(1.0),
            error_probability: 0.0,
            abandon_probability: 0.0,
            local_load_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &'static str, reason: &str| SimError::BadProfile {
            peer: self.peer_id.clone(),
            field,
            reason: reason.to_string(),
        };
        let non_negative = |v: f64| v >= 0.0 && v.is_finite();
        let probability = |v: f64| (0.0..=1.0).contains(&v);
        if !non_negative(self.processing_seconds_per_unit) {
            return Err(bad("processing_seconds_per_unit", "must be a finite value >= 0"));
        }
        if !non_negative(self.one_way_latency) {
            return Err(bad("one_way_latency", "must be a finite value >= 0"));
        }
        if !non_negative(self.serialization_delay_per_unit) {
            return Err(bad("serialization_delay_per_unit", "must be a finite value >= 0"));
        }
        if !probability(self.error_probability) {
            return Err(bad("error_probability", "must lie in [0, 1]"));
        }
        if !probability(self.abandon_probability) {
            return Err(bad("abandon_probability", "must lie in [0, 1]"));
        }
        if !(self.local_load_factor >= 1.0 && self.local_load_factor.is_finite()) {
            return Err(bad("local_load_factor", "must be a finite value >= 1"));
        }
        match &self.availability {
            AvailabilitySpec::Fraction(p) if !probability(*p) => {
                return Err(bad("availability", "fraction must lie in [0, 1]"));
            }
            AvailabilitySpec::Schedule(intervals) => {
                let mut cursor = f64::NEG_INFINITY;
                for &(s, e) in intervals {
                    if !(s.is_finite() && e.is_finite() && s <= e && s >= cursor) {
                        return Err(bad(
                            "availability",
                            "intervals must be ordered, disjoint and non-reversed",
                        ));
                    }
                    cursor = e;
                }
            }
            AvailabilitySpec::Fraction(_) => {}
        }
        Ok(())
    }

    /// Busy time for a batch of `n` units once it has arrived.
    pub fn work_time(&self, n: u32) -> Seconds {
        let n = f64::from(n);
        n * self.processing_seconds_per_unit * self.local_load_factor + n * self.serialization_delay_per_unit
    }

    /// Per-unit turnaround a failure-free batch of `n` units would show:
    /// `(2L + n * P * load) / n`.
    pub fn ground_truth_turnaround(&self, n: u32) -> Seconds {
        (2.0 * self.one_way_latency + self.work_time(n)) / f64::from(n)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, peer, purpose)`.
pub fn substream(seed: u64, peer_id: &PeerId, purpose: &str) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(purpose.len() + 1 + peer_id.as_str().len());
    key.extend_from_slice(purpose.as_bytes());
    key.push(0);
    key.extend_from_slice(peer_id.as_str().as_bytes());
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(&key)))
}

enum Track {
    Intervals(Vec<(Seconds, Seconds)>),
    Epochs {
        length: Seconds,
        up_probability: f64,
        rng: Box<ChaCha8Rng>,
        states: Vec<bool>,
    },
}

/// Materialised availability of one peer. Epoch-based tracks are drawn
/// lazily, in epoch order, from the peer's availability stream.
pub struct AvailabilityTrack {
    track: Track,
}

impl AvailabilityTrack {
    pub fn new(spec: &AvailabilitySpec, epoch_length: Seconds, seed: u64, peer_id: &PeerId) -> Self {
        let track = match spec {
            AvailabilitySpec::Schedule(intervals) => {
                let mut merged: Vec<(Seconds, Seconds)> = Vec::with_capacity(intervals.len());
                for &(s, e) in intervals {
                    match merged.last_mut() {
                        Some(last) if s <= last.1 => last.1 = last.1.max(e),
                        _ => merged.push((s, e)),
                    }
                }
                Track::Intervals(merged)
            }
            AvailabilitySpec::Fraction(p) => Track::Epochs {
                length: epoch_length,
                up_probability: *p,
                rng: Box::new(substream(seed, peer_id, "availability")),
                states: Vec::new(),
            },
        };
        Self { track }
    }

    fn epoch_up(up_probability: f64, rng: &mut ChaCha8Rng, states: &mut Vec<bool>, k: usize) -> bool {
        while states.len() <= k {
            let draw: f64 = rng.gen();
            states.push(draw < up_probability);
        }
        states[k]
    }

    fn epoch_index(t: Seconds, length: Seconds) -> usize {
        (t.max(0.0) / length).floor() as usize
    }

    pub fn is_up(&mut self, t: Seconds) -> bool {
        match &mut self.track {
            Track::Intervals(iv) => iv.iter().any(|&(s, e)| s <= t && t <= e),
            Track::Epochs {
                length,
                up_probability,
                rng,
                states,
            } => {
                let k = Self::epoch_index(t, *length);
                Self::epoch_up(*up_probability, rng, states, k)
            }
        }
    }

    /// True when the peer stays up over the whole of `[from, to]`.
    pub fn up_throughout(&mut self, from: Seconds, to: Seconds) -> bool {
        match &mut self.track {
            Track::Intervals(iv) => iv.iter().any(|&(s, e)| s <= from && to <= e),
            Track::Epochs {
                length,
                up_probability,
                rng,
                states,
            } => {
                let first = Self::epoch_index(from, *length);
                let mut last = Self::epoch_index(to, *length);
                // An interval ending exactly on an epoch edge does not touch the next epoch.
                if to > from && last > first && (last as f64) * *length >= to {
                    last -= 1;
                }
                (first..=last).all(|k| Self::epoch_up(*up_probability, rng, states, k))
            }
        }
    }

    /// Up-intervals clipped to `[from, to]`, ordered and disjoint.
    pub fn up_intervals_within(&mut self, from: Seconds, to: Seconds) -> Vec<(Seconds, Seconds)> {
        match &mut self.track {
            Track::Intervals(iv) => iv
                .iter()
                .filter(|&&(s, e)| e >= from && s <= to)
                .map(|&(s, e)| (s.max(from), e.min(to)))
                .collect(),
            Track::Epochs {
                length,
                up_probability,
                rng,
                states,
            } => {
                let mut out: Vec<(Seconds, Seconds)> = Vec::new();
                if !(to > from) {
                    return out;
                }
                let mut k = Self::epoch_index(from, *length);
                loop {
                    let start = (k as f64) * *length;
                    if start >= to {
                        break;
                    }
                    if Self::epoch_up(*up_probability, rng, states, k) {
                        let s = start.max(from);
                        let e = (start + *length).min(to);
                        match out.last_mut() {
                            Some(last) if last.1 >= s => last.1 = e,
                            _ => out.push((s, e)),
                        }
                    }
                    k += 1;
                }
                out
            }
        }
    }
}

/// Outcome of handing one batch to a peer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOutcome {
    pub kind: ResultKind,
    /// When the reply reaches the distributor; `None` if it never does.
    pub reply_time: Option<Seconds>,
}

/// Plays one batch of `n` units dispatched at `dispatch_time`.
///
/// Two uniform draws are taken per batch regardless of outcome (abandon,
/// then error) so a peer's stream stays aligned across scenario variants.
pub fn simulate_batch(
    profile: &PeerProfile,
    availability: &mut AvailabilityTrack,
    n: u32,
    dispatch_time: Seconds,
    rng: &mut impl Rng,
) -> BatchOutcome {
    assert!(n >= 1, "batch must carry at least one unit");
    let abandon_draw: f64 = rng.gen();
    let error_draw: f64 = rng.gen();
    let arrival = dispatch_time + profile.one_way_latency;
    let done = arrival + profile.work_time(n);
    if abandon_draw < profile.abandon_probability || !availability.up_throughout(arrival, done) {
        return BatchOutcome {
            kind: ResultKind::Incomplete,
            reply_time: None,
        };
    }
    let kind = if error_draw < profile.error_probability {
        ResultKind::Erroneous
    } else {
        ResultKind::Correct
    };
    BatchOutcome {
        kind,
        reply_time: Some(done + profile.one_way_latency),
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;

    use super::*;
    use crate::metrics::estimate_availability;

    #[test]
    fn schedule_at_now_fires_next() {
        let mut c: SimClock<&str> = SimClock::new(0);
        c.schedule(0.0, "a").unwrap();
        let e = c.step().unwrap();
        assert_eq!((e.fire_time, e.payload), (0.0, "a"));
    }

    #[test]
    fn equal_times_fire_fifo() {
        let mut c = SimClock::new(0);
        for i in 0..5 {
            c.schedule(3.0, i).unwrap();
        }
        let order: Vec<_> = std::iter::from_fn(|| c.step()).map(|e| e.payload).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn past_event_rejected() {
        let mut c = SimClock::new(0);
        c.schedule(2.0, ()).unwrap();
        c.step();
        assert_eq!(
            c.schedule(1.0, ()),
            Err(SimError::PastEvent {
                now: 2.0,
                fire_time: 1.0
            })
        );
        assert!(c.schedule(f64::NAN, ()).is_err());
    }

    #[test]
    fn step_order_and_exhaustion() {
        let mut c: SimClock<u8> = SimClock::new(0);
        assert!(c.step().is_none());
        c.schedule(2.0, 2).unwrap();
        c.schedule(1.0, 1).unwrap();
        assert_eq!(c.step().unwrap().payload, 1);
        assert_eq!(c.step().unwrap().payload, 2);
        assert_eq!(c.now(), 2.0);
        assert!(c.step().is_none());
    }

    proptest! {
        #[test]
        fn n_schedules_n_steps(times in proptest::collection::vec(0.0f64..100.0, 0..200)) {
            let mut c = SimClock::new(0);
            for (i, t) in times.iter().enumerate() {
                c.schedule(*t, i).unwrap();
            }
            let mut steps = 0;
            let mut last = (f64::NEG_INFINITY, 0usize);
            while let Some(e) = c.step() {
                prop_assert!(e.fire_time > last.0 || (e.fire_time == last.0 && e.payload > last.1) || steps == 0);
                last = (e.fire_time, e.payload);
                steps += 1;
            }
            prop_assert_eq!(steps, times.len());
        }
    }

    fn always_up() -> AvailabilityTrack {
        AvailabilityTrack::new(&AvailabilitySpec::Fraction(1.0), 10.0, 0, &PeerId::new("p"))
    }

    #[test]
    fn zero_cost_peer_replies_at_dispatch() {
        let p = PeerProfile::perfect("p", 0.0, 0.0);
        let mut rng = substream(1, &p.peer_id, "batch");
        let out = simulate_batch(&p, &mut always_up(), 1, 4.0, &mut rng);
        assert_eq!(out.kind, ResultKind::Correct);
        assert_eq!(out.reply_time, Some(4.0));
    }

    #[test]
    fn latency_plus_processing_trace() {
        let p = PeerProfile::perfect("p", 0.1, 1.0);
        let mut rng = substream(1, &p.peer_id, "batch");
        let out = simulate_batch(&p, &mut always_up(), 1, 0.0, &mut rng);
        assert!((out.reply_time.unwrap() - 1.2).abs() < 1e-12);
        assert!((p.ground_truth_turnaround(3) - 3.2 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn always_abandons() {
        let mut p = PeerProfile::perfect("p", 0.1, 1.0);
        p.abandon_probability = 1.0;
        let mut rng = substream(7, &p.peer_id, "batch");
        for i in 0..50 {
            let out = simulate_batch(&p, &mut always_up(), 1, f64::from(i), &mut rng);
            assert_eq!(
                out,
                BatchOutcome {
                    kind: ResultKind::Incomplete,
                    reply_time: None
                }
            );
        }
    }

    #[test]
    fn always_erroneous_still_replies() {
        let mut p = PeerProfile::perfect("p", 0.1, 1.0);
        p.error_probability = 1.0;
        let mut rng = substream(7, &p.peer_id, "batch");
        let out = simulate_batch(&p, &mut always_up(), 2, 0.0, &mut rng);
        assert_eq!(out.kind, ResultKind::Erroneous);
        assert!(out.reply_time.is_some());
    }

    #[test]
    fn down_during_processing_is_incomplete() {
        let mut p = PeerProfile::perfect("p", 0.0, 5.0);
        p.availability = AvailabilitySpec::Schedule(vec![(0.0, 3.0), (10.0, 20.0)]);
        let mut track = AvailabilityTrack::new(&p.availability, 10.0, 0, &p.peer_id);
        let mut rng = substream(1, &p.peer_id, "batch");
        assert_eq!(
            simulate_batch(&p, &mut track, 1, 0.0, &mut rng).kind,
            ResultKind::Incomplete
        );
        assert_eq!(
            simulate_batch(&p, &mut track, 1, 12.0, &mut rng).kind,
            ResultKind::Correct
        );
    }

    #[test]
    fn schedule_track_queries() {
        let spec = AvailabilitySpec::Schedule(vec![(0.0, 25.0), (25.0, 30.0), (50.0, 75.0)]);
        let mut t = AvailabilityTrack::new(&spec, 10.0, 0, &PeerId::new("p"));
        assert!(t.is_up(0.0) && t.is_up(30.0) && !t.is_up(40.0));
        assert!(t.up_throughout(10.0, 29.0));
        assert!(!t.up_throughout(10.0, 55.0));
        assert_eq!(t.up_intervals_within(20.0, 60.0), vec![(20.0, 30.0), (50.0, 60.0)]);
    }

    #[test]
    fn schedule_availability_is_reproduced() {
        let spec = AvailabilitySpec::Schedule(vec![(0.0, 25.0), (50.0, 75.0)]);
        let mut t = AvailabilityTrack::new(&spec, 10.0, 0, &PeerId::new("p"));
        let obs = estimate_availability(&t.up_intervals_within(0.0, 100.0), (0.0, 100.0)).unwrap();
        assert_eq!(obs.availability, 0.5);
    }

    #[test]
    fn epoch_track_consistent() {
        let pid = PeerId::new("p");
        let mut t = AvailabilityTrack::new(&AvailabilitySpec::Fraction(0.5), 10.0, 3, &pid);
        let intervals = t.up_intervals_within(0.0, 10_000.0);
        let obs = estimate_availability(&intervals, (0.0, 10_000.0)).unwrap();
        assert!((obs.availability - 0.5).abs() < 0.05, "{}", obs.availability);
        for &(s, e) in &intervals {
            assert!(t.up_throughout(s, e));
            assert!(t.is_up((s + e) / 2.0));
        }
        let mut again = AvailabilityTrack::new(&AvailabilitySpec::Fraction(0.5), 10.0, 3, &pid);
        assert_eq!(again.up_intervals_within(0.0, 10_000.0), intervals);
    }

    #[test]
    fn epoch_edge_does_not_touch_next_epoch() {
        let mut t = AvailabilityTrack::new(&AvailabilitySpec::Fraction(0.0), 10.0, 0, &PeerId::new("p"));
        assert!(!t.up_throughout(0.0, 10.0));
        let mut t = AvailabilityTrack::new(&AvailabilitySpec::Fraction(1.0), 10.0, 0, &PeerId::new("p"));
        assert!(t.up_throughout(0.0, 10.0));
        assert_eq!(t.up_intervals_within(5.0, 35.0), vec![(5.0, 35.0)]);
    }

    #[test]
    fn substreams_are_independent_of_other_peers() {
        let a = PeerId::new("a");
        let x: Vec<u64> = substream(9, &a, "batch")
            .sample_iter(rand::distributions::Standard)
            .take(4)
            .collect();
        let y: Vec<u64> = substream(9, &a, "batch")
            .sample_iter(rand::distributions::Standard)
            .take(4)
            .collect();
        let z: Vec<u64> = substream(9, &PeerId::new("b"), "batch")
            .sample_iter(rand::distributions::Standard)
            .take(4)
            .collect();
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn profile_validation_names_field() {
        let mut p = PeerProfile::perfect("p", 0.1, 1.0);
        p.error_probability = 2.0;
        assert!(matches!(
            p.validate(),
            Err(SimError::BadProfile {
                field: "error_probability",
                ..
            })
        ));
        let mut p = PeerProfile::perfect("p", 0.1, 1.0);
        p.local_load_factor = 0.5;
        assert!(matches!(
            p.validate(),
            Err(SimError::BadProfile {
                field: "local_load_factor",
                ..
            })
        ));
    }
}
