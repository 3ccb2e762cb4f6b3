//! Jobs, task units, assignments and result kinds.
//!
//! A job is expressed directly as a count of equal-sized task units. The
//! distributor splits it into units, ships them to processors in batches
//! (`Assignment`) and receives one `ResultRecord` per batch.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulated time in seconds.
pub type Seconds = f64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PeerId(pub String);

impl PeerId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JobId(pub String);

impl JobId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// `<job_id>:<index>`; stable across runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitId(pub String);

impl UnitId {
    pub fn for_index(job: &JobId, index: u32) -> Self {
        Self(format!("{}:{}", job.0, index))
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifier of one dispatched batch (`t_id`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskId(pub u64);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("job {0} has size 0; a job needs at least one task unit")]
    EmptyJob(JobId),
    #[error("job {job}: deadline {deadline} must be after arrival {arrival}")]
    DeadlineBeforeArrival {
        job: JobId,
        arrival: Seconds,
        deadline: Seconds,
    },
    #[error("job {job}: unit size must be positive and finite, got {unit_size}")]
    BadUnitSize { job: JobId, unit_size: f64 },
    #[error("assignment {0} carries no task units")]
    EmptyAssignment(TaskId),
}

/// A deadline-driven job: arrival time, absolute deadline and size in units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: JobId,
    pub arrival_time: Seconds,
    pub deadline: Seconds,
    /// Number of task units.
    pub size: u32,
    /// Abstract work carried by each unit; identical for all units of a job.
    #[serde(default = "unit_work")]
    pub unit_size: f64,
}

fn unit_work() -> f64 {
    1.0
}

impl JobSpec {
    pub fn new(job_id: JobId, arrival_time: Seconds, deadline: Seconds, size: u32) -> Result<Self, ModelError> {
        let job = Self {
            job_id,
            arrival_time,
            deadline,
            size,
            unit_size: 1.0,
        };
        job.validate()?;
        Ok(job)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.size == 0 {
            return Err(ModelError::EmptyJob(self.job_id.clone()));
        }
        if !(self.deadline > self.arrival_time) {
            return Err(ModelError::DeadlineBeforeArrival {
                job: self.job_id.clone(),
                arrival: self.arrival_time,
                deadline: self.deadline,
            });
        }
        if !(self.unit_size > 0.0 && self.unit_size.is_finite()) {
            return Err(ModelError::BadUnitSize {
                job: self.job_id.clone(),
                unit_size: self.unit_size,
            });
        }
        Ok(())
    }

    /// Total abstract work of the job.
    pub fn total_work(&self) -> f64 {
        f64::from(self.size) * self.unit_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskUnit {
    pub unit_id: UnitId,
    pub job_id: JobId,
    pub unit_size: f64,
}

/// A batch of units sent to one processor at `dispatch_time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task_id: TaskId,
    pub peer_id: PeerId,
    pub unit_ids: Vec<UnitId>,
    pub dispatch_time: Seconds,
}

impl Assignment {
    pub fn new(
        task_id: TaskId,
        peer_id: PeerId,
        unit_ids: Vec<UnitId>,
        dispatch_time: Seconds,
    ) -> Result<Self, ModelError> {
        if unit_ids.is_empty() {
            return Err(ModelError::EmptyAssignment(task_id));
        }
        Ok(Self {
            task_id,
            peer_id,
            unit_ids,
            dispatch_time,
        })
    }

    /// Batch size `n`.
    pub fn batch_size(&self) -> u32 {
        self.unit_ids.len() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResultKind {
    Correct,
    Erroneous,
    Incomplete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task_id: TaskId,
    pub peer_id: PeerId,
    pub kind: ResultKind,
    pub completion_time: Seconds,
}

/// Splits a job into `size` equal units with ids `<job>:0 .. <job>:size-1`.
pub fn split_job(job: &JobSpec) -> Result<Vec<TaskUnit>, ModelError> {
    if job.size == 0 {
        return Err(ModelError::EmptyJob(job.job_id.clone()));
    }
    Ok((0..job.size)
        .map(|i| TaskUnit {
            unit_id: UnitId::for_index(&job.job_id, i),
            job_id: job.job_id.clone(),
            unit_size: job.unit_size,
        })
        .collect())
}

/// A job succeeds when it finishes no later than its deadline.
pub fn is_successful(job: &JobSpec, finish_time: Seconds) -> bool {
    finish_time <= job.deadline
}
