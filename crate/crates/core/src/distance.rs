//! Application-level distance measurement on the task distributor.
//!
//! The distributor keeps two lookup tables: a TaskID table recording when
//! each batch left and for whom, and a Turnaround-Time table holding the
//! current per-unit turnaround estimate for each processor. Measurement
//! only reads timestamps of messages that are exchanged anyway.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task_model::{PeerId, Seconds, TaskId};

pub const DEFAULT_EWMA_ALPHA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum DistanceError {
    #[error("task {0} is already in the TaskID table")]
    DuplicateTask(TaskId),
    #[error("result for unknown task {0}")]
    UnknownTask(TaskId),
    #[error("completion time {completion} precedes dispatch time {dispatch}")]
    ClockInversion { dispatch: Seconds, completion: Seconds },
    #[error("batch size must be at least 1")]
    EmptyBatch,
    #[error("smoothing factor {0} outside (0, 1]")]
    BadAlpha(f64),
}

/// One TaskID-table row: `(T_S, TP_id, n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchEntry {
    pub dispatch_time: Seconds,
    pub peer_id: PeerId,
    pub batch_size: u32,
}

#[derive(Debug, Clone, Default)]
pub struct TaskIdTable {
    entries: BTreeMap<TaskId, DispatchEntry>,
}

impl TaskIdTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_dispatch(
        &mut self,
        task_id: TaskId,
        peer_id: PeerId,
        batch_size: u32,
        now: Seconds,
    ) -> Result<(), DistanceError> {
        if batch_size == 0 {
            return Err(DistanceError::EmptyBatch);
        }
        if self.entries.contains_key(&task_id) {
            return Err(DistanceError::DuplicateTask(task_id));
        }
        self.entries.insert(
            task_id,
            DispatchEntry {
                dispatch_time: now,
                peer_id,
                batch_size,
            },
        );
        Ok(())
    }

    pub fn get(&self, task_id: TaskId) -> Option<&DispatchEntry> {
        self.entries.get(&task_id)
    }

    pub fn remove(&mut self, task_id: TaskId) -> Option<DispatchEntry> {
        self.entries.remove(&task_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-unit turnaround of one batch: `(T_C - T_S) / n`.
pub fn measure_turnaround(entry: &DispatchEntry, completion: Seconds) -> Result<Seconds, DistanceError> {
    if entry.batch_size == 0 {
        return Err(DistanceError::EmptyBatch);
    }
    if completion < entry.dispatch_time {
        return Err(DistanceError::ClockInversion {
            dispatch: entry.dispatch_time,
            completion,
        });
    }
    Ok((completion - entry.dispatch_time) / f64::from(entry.batch_size))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnaroundEstimate {
    pub estimate: Seconds,
    pub samples: u64,
}

/// Exported row of the Turnaround-Time table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnaroundRow {
    pub peer_id: PeerId,
    pub estimate_seconds: Seconds,
    pub sample_count: u64,
}

/// Peer id -> smoothed per-unit turnaround.
///
/// The first sample is stored verbatim; later samples are folded in as
/// `old + alpha * (sample - old)`, which is `alpha*sample + (1-alpha)*old`
/// written so that a repeated sample leaves the estimate bit-identical.
#[derive(Debug, Clone)]
pub struct TurnaroundTable {
    alpha: f64,
    entries: BTreeMap<PeerId, TurnaroundEstimate>,
}

impl Default for TurnaroundTable {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_EWMA_ALPHA,
            entries: BTreeMap::new(),
        }
    }
}

impl TurnaroundTable {
    pub fn new(alpha: f64) -> Result<Self, DistanceError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(DistanceError::BadAlpha(alpha));
        }
        Ok(Self {
            alpha,
            entries: BTreeMap::new(),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Folds a sample in and returns the new estimate.
    pub fn update(&mut self, peer_id: &PeerId, sample: Seconds) -> Seconds {
        let alpha = self.alpha;
        match self.entries.get_mut(peer_id) {
            Some(e) => {
                e.estimate += alpha * (sample - e.estimate);
                e.samples += 1;
                e.estimate
            }
            None => {
                self.entries.insert(
                    peer_id.clone(),
                    TurnaroundEstimate {
                        estimate: sample,
                        samples: 1,
                    },
                );
                sample
            }
        }
    }

    pub fn lookup(&self, peer_id: &PeerId) -> Option<Seconds> {
        self.entries.get(peer_id).map(|e| e.estimate)
    }

    pub fn entry(&self, peer_id: &PeerId) -> Option<TurnaroundEstimate> {
        self.entries.get(peer_id).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rows sorted by peer id.
    pub fn rows(&self) -> Vec<TurnaroundRow> {
        self.entries
            .iter()
            .map(|(p, e)| TurnaroundRow {
                peer_id: p.clone(),
                estimate_seconds: e.estimate,
                sample_count: e.samples,
            })
            .collect()
    }
}

/// Table access accounting for the distributor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessStats {
    pub dispatches: u64,
    pub results_processed: u64,
    /// Indexed table accesses made while processing results.
    pub result_accesses: u64,
    pub timeouts: u64,
    pub orphans: u64,
}

/// Outcome of processing one result.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub peer_id: PeerId,
    pub batch_size: u32,
    pub sample: Seconds,
    pub estimate: Seconds,
}

/// Both lookup tables plus access accounting.
#[derive(Debug, Clone, Default)]
pub struct DistanceTracker {
    task_ids: TaskIdTable,
    turnaround: TurnaroundTable,
    stats: AccessStats,
}

impl DistanceTracker {
    pub fn new(alpha: f64) -> Result<Self, DistanceError> {
        Ok(Self {
            task_ids: TaskIdTable::new(),
            turnaround: TurnaroundTable::new(alpha)?,
            stats: AccessStats::default(),
        })
    }

    pub fn record_dispatch(
        &mut self,
        task_id: TaskId,
        peer_id: PeerId,
        batch_size: u32,
        now: Seconds,
    ) -> Result<(), DistanceError> {
        self.task_ids.record_dispatch(task_id, peer_id, batch_size, now)?;
        self.stats.dispatches += 1;
        Ok(())
    }

    /// Matches a returned result against the TaskID table and updates the
    /// Turnaround-Time table: one lookup, one removal, one upsert.
    pub fn record_result(&mut self, task_id: TaskId, completion: Seconds) -> Result<Measurement, DistanceError> {
        let Some(entry) = self.task_ids.get(task_id) else {
            self.stats.orphans += 1;
            return Err(DistanceError::UnknownTask(task_id));
        };
        let sample = measure_turnaround(entry, completion)?;
        let entry = self.task_ids.remove(task_id).expect("entry just read");
        let estimate = self.turnaround.update(&entry.peer_id, sample);
        self.stats.results_processed += 1;
        self.stats.result_accesses += 3;
        Ok(Measurement {
            peer_id: entry.peer_id,
            batch_size: entry.batch_size,
            sample,
            estimate,
        })
    }

    /// Drops a batch that never answered. No distance sample is taken.
    pub fn resolve_timeout(&mut self, task_id: TaskId) -> Result<DispatchEntry, DistanceError> {
        let entry = self
            .task_ids
            .remove(task_id)
            .ok_or(DistanceError::UnknownTask(task_id))?;
        self.stats.timeouts += 1;
        Ok(entry)
    }

    pub fn lookup_distance(&self, peer_id: &PeerId) -> Option<Seconds> {
        self.turnaround.lookup(peer_id)
    }

    pub fn task_ids(&self) -> &TaskIdTable {
        &self.task_ids
    }

    pub fn turnaround(&self) -> &TurnaroundTable {
        &self.turnaround
    }

    pub fn stats(&self) -> AccessStats {
        self.stats
    }
}
