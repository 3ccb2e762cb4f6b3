//! Scenario files, experiment runs and report output.
//!
//! A scenario is one JSON document holding the peer population, the jobs
//! and the protocol settings. Every omitted setting takes its default.
//! Runs are deterministic in `(scenario, seed)`.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distance::TurnaroundRow;
use crate::distributor::{
    simulate, DistributorConfig, DistributorError, JobOutcome, MeasurementMode, SimulationOutput,
};
use crate::selection::{CoarseClass, PeerGroup};
use crate::simnet::PeerProfile;
use crate::task_model::{JobId, JobSpec, PeerId, Seconds};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("unknown report format `{0}` (expected csv or json)")]
    UnknownFormat(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn default_mu() -> f64 {
    crate::selection::DEFAULT_MU
}
fn default_alpha() -> f64 {
    crate::distance::DEFAULT_EWMA_ALPHA
}
fn default_probe_batches() -> u32 {
    3
}
fn default_timeout_multiplier() -> f64 {
    3.0
}
fn default_timeout_floor() -> f64 {
    10.0
}
fn default_max_retries() -> u32 {
    5
}
fn default_batch_size() -> u32 {
    1
}
fn default_announce_window() -> f64 {
    5.0
}
fn default_availability_epoch() -> f64 {
    10.0
}

/// On-disk scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_alpha")]
    pub ewma_alpha: f64,
    #[serde(default = "default_probe_batches")]
    pub probe_batches: u32,
    #[serde(default = "default_timeout_multiplier")]
    pub timeout_multiplier: f64,
    #[serde(default = "default_timeout_floor")]
    pub timeout_floor: Seconds,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_batch_size")]
    pub batch_size: u32,
    #[serde(default = "default_announce_window")]
    pub announce_window: Seconds,
    #[serde(default = "default_availability_epoch")]
    pub availability_epoch: Seconds,
    #[serde(default)]
    pub dispatch_to_all: bool,
    /// Silences the warning for jobs with no more units than peers.
    #[serde(default)]
    pub allow_few_units: bool,
    pub peers: Vec<PeerProfile>,
    pub jobs: Vec<JobSpec>,
}

impl ScenarioConfig {
    pub fn distributor_config(&self) -> DistributorConfig {
        DistributorConfig {
            mu: self.mu,
            ewma_alpha: self.ewma_alpha,
            probe_batches: self.probe_batches,
            timeout_multiplier: self.timeout_multiplier,
            timeout_floor: self.timeout_floor,
            max_retries: self.max_retries,
            batch_size: self.batch_size,
            announce_window: self.announce_window,
            availability_epoch: self.availability_epoch,
            dispatch_to_all: self.dispatch_to_all,
        }
    }

    /// Checks every field; returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let invalid = |field: String, reason: String| ConfigError::Invalid { field, reason };
        self.distributor_config().validate().map_err(|e| match e {
            DistributorError::Setting { field, reason } => invalid(field.to_string(), reason),
            other => invalid("settings".into(), other.to_string()),
        })?;
        let mut seen = std::collections::BTreeSet::new();
        for (i, p) in self.peers.iter().enumerate() {
            p.validate().map_err(|e| match e {
                crate::simnet::SimError::BadProfile { field, reason, .. } => {
                    invalid(format!("peers[{i}].{field}"), reason)
                }
                other => invalid(format!("peers[{i}]"), other.to_string()),
            })?;
            if !seen.insert(&p.peer_id) {
                return Err(invalid(
                    format!("peers[{i}].peer_id"),
                    format!("duplicate id {}", p.peer_id),
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut warnings = Vec::new();
        for (i, j) in self.jobs.iter().enumerate() {
            j.validate().map_err(|e| invalid(format!("jobs[{i}]"), e.to_string()))?;
            if !seen.insert(&j.job_id) {
                return Err(invalid(
                    format!("jobs[{i}].job_id"),
                    format!("duplicate id {}", j.job_id),
                ));
            }
            if !self.allow_few_units && j.size as usize <= self.peers.len() {
                warnings.push(format!(
                    "job {} has {} task units for {} task processors; units per job should exceed the processor count (set allow_few_units to silence)",
                    j.job_id,
                    j.size,
                    self.peers.len()
                ));
            }
        }
        Ok(warnings)
    }
}

/// A validated scenario plus anything worth telling the user.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ScenarioConfig,
    pub warnings: Vec<String>,
}

pub fn parse_config(text: &str) -> Result<LoadedConfig, ConfigError> {
    let config: ScenarioConfig = serde_json::from_str(text)?;
    let warnings = config.validate()?;
    Ok(LoadedConfig { config, warnings })
}

pub fn load_config(path: impl AsRef<Path>) -> Result<LoadedConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

/// Rounds to the report precision of six decimals.
pub fn round6(x: f64) -> f64 {
    let r = (x * 1e6).round() / 1e6;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    /// `PG1`..`PG4`, or `unclassified` for responders never measured.
    pub group: String,
    pub peer_count: u32,
    pub mean_credibility: Option<f64>,
    pub mean_distance: Option<f64>,
    pub units_completed: u32,
    /// Units completed for jobs that met their deadline.
    pub deadline_units: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: JobId,
    pub outcome: JobOutcome,
    pub start_time: Seconds,
    pub end_time: Seconds,
    pub finish_time: Option<Seconds>,
    pub met_deadline: bool,
    pub size: u32,
    pub completed_units: u32,
    pub responders: u32,
    pub dropped: u32,
    pub selected: u32,
    pub message_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSummary {
    pub job_id: JobId,
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
pub struct RunSummary {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub message_count: u64,
    pub orphan_results: u64,
    pub groups: Vec<GroupAggregate>,
    pub jobs: Vec<JobSummary>,
    pub peers: Vec<PeerSummary>,
    pub turnaround: Vec<TurnaroundRow>,
}

impl RunSummary {
    /// Fraction of jobs that met their deadline; `None` without jobs.
    pub fn deadline_success_rate(&self) -> Option<f64> {
        if self.jobs.is_empty() {
            return None;
        }
        let met = self.jobs.iter().filter(|j| j.met_deadline).count();
        Some(met as f64 / self.jobs.len() as f64)
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Simulation(#[from] DistributorError),
}

fn mean_of(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Builds the report view of a finished simulation.
pub fn summarize(config: &ScenarioConfig, seed: u64, out: &SimulationOutput) -> RunSummary {
    let mut config = config.clone();
    config.seed = seed;

    let mut jobs = Vec::with_capacity(out.epochs.len());
    let mut peers = Vec::new();
    for epoch in &out.epochs {
        let j = &epoch.job;
        jobs.push(JobSummary {
            job_id: j.job_id.clone(),
            outcome: j.outcome,
            start_time: round6(j.start_time),
            end_time: round6(j.end_time),
            finish_time: j.finish_time.map(round6),
            met_deadline: j.met_deadline,
            size: j.size,
            completed_units: j.completed_units,
            responders: j.responders,
            dropped: j.dropped,
            selected: j.selected,
            message_count: epoch.message_count,
        });
        for p in &epoch.peers {
            peers.push(PeerSummary {
                job_id: j.job_id.clone(),
                peer_id: p.peer_id.clone(),
                credibility: p.credibility.map(round6),
                computation_time: round6(p.computation_time),
                distance: p.distance.map(round6),
                coarse: p.coarse,
                group: p.group,
                selected: p.selected,
                units_completed: p.units_completed,
                correct: p.correct,
                erroneous: p.erroneous,
                incomplete: p.incomplete,
            });
        }
    }

    let group_keys: Vec<Option<PeerGroup>> = PeerGroup::ALL.iter().copied().map(Some).chain([None]).collect();
    let groups = group_keys
        .into_iter()
        .map(|key| {
            let mut creds = Vec::new();
            let mut dists = Vec::new();
            let (mut count, mut units, mut deadline_units) = (0, 0, 0);
            for epoch in &out.epochs {
                for p in epoch.peers.iter().filter(|p| p.group == key) {
                    count += 1;
                    units += p.units_completed;
                    if epoch.job.met_deadline {
                        deadline_units += p.units_completed;
                    }
                    creds.extend(p.credibility);
                    dists.extend(p.distance);
                }
            }
            GroupAggregate {
                group: key.map_or_else(|| "unclassified".to_string(), |g| g.to_string()),
                peer_count: count,
                mean_credibility: mean_of(&creds).map(round6),
                mean_distance: mean_of(&dists).map(round6),
                units_completed: units,
                deadline_units,
            }
        })
        .collect();

    RunSummary {
        seed,
        config,
        message_count: out.trace.len() as u64,
        orphan_results: out.orphan_results,
        groups,
        jobs,
        peers,
        turnaround: out
            .turnaround
            .iter()
            .map(|r| TurnaroundRow {
                peer_id: r.peer_id.clone(),
                estimate_seconds: round6(r.estimate_seconds),
                sample_count: r.sample_count,
            })
            .collect(),
    }
}

/// Runs the scenario with its own seed.
pub fn run_scenario(config: &ScenarioConfig) -> Result<RunSummary, RunError> {
    run_scenario_seeded(config, config.seed)
}

pub fn run_scenario_seeded(config: &ScenarioConfig, seed: u64) -> Result<RunSummary, RunError> {
    let out = run_raw(config, seed, MeasurementMode::Passive)?;
    Ok(summarize(config, seed, &out))
}

/// Full simulation output, including the message trace.
pub fn run_raw(config: &ScenarioConfig, seed: u64, mode: MeasurementMode) -> Result<SimulationOutput, RunError> {
    config.validate()?;
    Ok(simulate(
        &config.distributor_config(),
        &config.peers,
        &config.jobs,
        seed,
        mode,
    )?)
}

/// Runs seeds `first_seed .. first_seed + count` in parallel; results come
/// back in seed order.
pub fn sweep(config: &ScenarioConfig, first_seed: u64, count: u64) -> Result<Vec<RunSummary>, RunError> {
    (0..count)
        .into_par_iter()
        .map(|i| run_scenario_seeded(config, first_seed.wrapping_add(i)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(ReportError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        })
    }
}

/// Column layout of the CSV report. Each row is a `peer`, `job` or `group`
/// record; columns that do not apply to a record are left empty.
pub const CSV_HEADER: [&str; 25] = [
    "record",
    "job_id",
    "peer_id",
    "group",
    "coarse",
    "selected",
    "credibility",
    "computation_time",
    "distance",
    "units_completed",
    "correct",
    "erroneous",
    "incomplete",
    "outcome",
    "finish_time",
    "met_deadline",
    "size",
    "completed_units",
    "responders",
    "dropped",
    "message_count",
    "peer_count",
    "mean_credibility",
    "mean_distance",
    "deadline_units",
];

fn fixed(x: f64) -> String {
    format!("{x:.6}")
}

fn opt_fixed(x: Option<f64>) -> String {
    x.map(fixed).unwrap_or_default()
}

fn outcome_name(o: JobOutcome) -> String {
    serde_json::to_value(o)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn csv_rows(summary: &RunSummary) -> Vec<Vec<String>> {
    let blank = || vec![String::new(); CSV_HEADER.len()];
    let mut rows = Vec::new();
    for p in &summary.peers {
        let mut r = blank();
        r[0] = "peer".into();
        r[1] = p.job_id.to_string();
        r[2] = p.peer_id.to_string();
        r[3] = p.group.map(|g| g.to_string()).unwrap_or_default();
        r[4] = p.coarse.map(|c| c.to_string()).unwrap_or_default();
        r[5] = p.selected.to_string();
        r[6] = opt_fixed(p.credibility);
        r[7] = fixed(p.computation_time);
        r[8] = opt_fixed(p.distance);
        r[9] = p.units_completed.to_string();
        r[10] = p.correct.to_string();
        r[11] = p.erroneous.to_string();
        r[12] = p.incomplete.to_string();
        rows.push(r);
    }
    for j in &summary.jobs {
        let mut r = blank();
        r[0] = "job".into();
        r[1] = j.job_id.to_string();
        r[13] = outcome_name(j.outcome);
        r[14] = opt_fixed(j.finish_time);
        r[15] = j.met_deadline.to_string();
        r[16] = j.size.to_string();
        r[17] = j.completed_units.to_string();
        r[18] = j.responders.to_string();
        r[19] = j.dropped.to_string();
        r[20] = j.message_count.to_string();
        rows.push(r);
    }
    if !summary.peers.is_empty() {
        for g in &summary.groups {
            let mut r = blank();
            r[0] = "group".into();
            r[3] = g.group.clone();
            r[9] = g.units_completed.to_string();
            r[21] = g.peer_count.to_string();
            r[22] = opt_fixed(g.mean_credibility);
            r[23] = opt_fixed(g.mean_distance);
            r[24] = g.deadline_units.to_string();
            rows.push(r);
        }
    }
    rows
}

fn write_csv(summaries: &[RunSummary], seed_column: bool) -> Result<Vec<u8>, ReportError> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    if seed_column {
        header.push("seed");
    }
    w.write_record(&header)?;
    for s in summaries {
        for mut row in csv_rows(s) {
            if seed_column {
                row.push(s.seed.to_string());
            }
            w.write_record(&row)?;
        }
    }
    w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))
}

/// Serialises one summary.
pub fn emit_report(summary: &RunSummary, format: ReportFormat) -> Result<Vec<u8>, ReportError> {
    match format {
        ReportFormat::Csv => write_csv(std::slice::from_ref(summary), false),
        ReportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(summary)?;
            bytes.push(b'\n');
            Ok(bytes)
        }
    }
}

/// Serialises a seed sweep: one CSV with a trailing `seed` column, or a
/// JSON array of summaries.
pub fn emit_sweep_report(summaries: &[RunSummary], format: ReportFormat) -> Result<Vec<u8>, ReportError> {
    match format {
        ReportFormat::Csv => write_csv(summaries, true),
        ReportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(summaries)?;
            bytes.push(b'\n');
            Ok(bytes)
        }
    }
}
