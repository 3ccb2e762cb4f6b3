//! Identification of efficient peers for deadline-driven work in a P2P
//! desktop grid, plus a deterministic simulator to exercise it.
//!
//! A task distributor announces a job, probes the peers that answer with
//! known-answer task units, and scores each responder on credibility,
//! computation time and application-level turnaround time. Responders are
//! sorted into four groups; only the first group receives real work.

// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distance;
pub mod distributor;
pub mod harness;
pub mod metrics;
pub mod selection;
pub mod simnet;
pub mod task_model;
