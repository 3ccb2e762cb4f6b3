//! Peer-group identification.
//!
//! Responders are first placed in a quadrant by computation time against
//! the population mean and per-unit distance against the population mean,
//! then split by the credibility threshold `mu`:
//!
//! | quadrant | PC_T vs mean | D vs mean | C_P >= mu | C_P < mu |
//! |----------|--------------|-----------|-----------|----------|
//! | G1       | >=           | <=        | PG1       | PG3      |
//! | G2       | >=           | >         | PG2       | PG4      |
//! | G3       | <            | <=        | PG3       | PG3      |
//! | G4       | <            | >         | PG4       | PG4      |
//!
//! Only PG1 is allowed to process real-time work.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::PeerSnapshot;
use crate::task_model::{PeerId, Seconds};

pub const DEFAULT_MU: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("cannot average an empty population")]
    EmptyPopulation,
    #[error("peer {0} has not been fully measured")]
    Unmeasured(PeerId),
    #[error("credibility threshold {0} outside [0, 1]")]
    BadThreshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopulationAverages {
    pub credibility: f64,
    pub computation_time: Seconds,
    pub distance: Seconds,
    pub population_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CoarseClass {
    G1,
    G2,
    G3,
    G4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PeerGroup {
    PG1,
    PG2,
    PG3,
    PG4,
}

impl PeerGroup {
    pub const ALL: [PeerGroup; 4] = [PeerGroup::PG1, PeerGroup::PG2, PeerGroup::PG3, PeerGroup::PG4];
}

impl fmt::Display for CoarseClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for PeerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Compensated mean, clamped to the observed range. Identical inputs give
/// back exactly that value, which keeps the inclusive comparisons honest.
fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry, mut count) = (0.0f64, 0.0f64, 0usize);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in values {
        let t = sum + x;
        carry += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
        count += 1;
        lo = lo.min(x);
        hi = hi.max(x);
    }
    ((sum + carry) / count as f64).clamp(lo, hi)
}

struct Measured<'a> {
    peer_id: &'a PeerId,
    credibility: f64,
    computation_time: f64,
    distance: f64,
}

fn measured(s: &PeerSnapshot) -> Result<Measured<'_>, SelectionError> {
    match (s.credibility, s.distance) {
        (Some(credibility), Some(distance)) => Ok(Measured {
            peer_id: &s.peer_id,
            credibility,
            computation_time: s.computation_time,
            distance,
        }),
        _ => Err(SelectionError::Unmeasured(s.peer_id.clone())),
    }
}

/// Means of credibility, computation time and distance over the responders.
pub fn population_averages(snapshots: &[PeerSnapshot]) -> Result<PopulationAverages, SelectionError> {
    if snapshots.is_empty() {
        return Err(SelectionError::EmptyPopulation);
    }
    let peers = snapshots.iter().map(measured).collect::<Result<Vec<_>, _>>()?;
    Ok(PopulationAverages {
        credibility: mean(peers.iter().map(|p| p.credibility)),
        computation_time: mean(peers.iter().map(|p| p.computation_time)),
        distance: mean(peers.iter().map(|p| p.distance)),
        population_size: peers.len(),
    })
}

/// Quadrant from raw values; favourable side inclusive on both axes.
pub fn coarse_class(computation_time: f64, distance: f64, averages: &PopulationAverages) -> CoarseClass {
    let fast = computation_time >= averages.computation_time;
    let near = distance <= averages.distance;
    match (fast, near) {
        (true, true) => CoarseClass::G1,
        (true, false) => CoarseClass::G2,
        (false, true) => CoarseClass::G3,
        (false, false) => CoarseClass::G4,
    }
}

pub fn classify_coarse(snapshot: &PeerSnapshot, averages: &PopulationAverages) -> Result<CoarseClass, SelectionError> {
    let m = measured(snapshot)?;
    Ok(coarse_class(m.computation_time, m.distance, averages))
}

pub fn assign_group(coarse: CoarseClass, credibility: f64, mu: f64) -> PeerGroup {
    let credible = credibility >= mu;
    match coarse {
        CoarseClass::G1 if credible => PeerGroup::PG1,
        CoarseClass::G1 => PeerGroup::PG3,
        CoarseClass::G2 if credible => PeerGroup::PG2,
        CoarseClass::G2 => PeerGroup::PG4,
        CoarseClass::G3 => PeerGroup::PG3,
        CoarseClass::G4 => PeerGroup::PG4,
    }
}

/// One classified responder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub peer_id: PeerId,
    pub credibility: f64,
    pub computation_time: Seconds,
    pub distance: Seconds,
    pub coarse: CoarseClass,
    pub group: PeerGroup,
}

impl Classification {
    pub fn selected(&self) -> bool {
        self.group == PeerGroup::PG1
    }
}

fn check_mu(mu: f64) -> Result<(), SelectionError> {
    if (0.0..=1.0).contains(&mu) {
        Ok(())
    } else {
        Err(SelectionError::BadThreshold(mu))
    }
}

/// Classifies every responder, sorted by peer id. Empty input gives an
/// empty result and `None` averages.
pub fn classify_population(
    snapshots: &[PeerSnapshot],
    mu: f64,
) -> Result<(Option<PopulationAverages>, Vec<Classification>), SelectionError> {
    check_mu(mu)?;
    if snapshots.is_empty() {
        return Ok((None, Vec::new()));
    }
    let averages = population_averages(snapshots)?;
    let mut out = snapshots
        .iter()
        .map(|s| {
            let m = measured(s)?;
            let coarse = coarse_class(m.computation_time, m.distance, &averages);
            Ok(Classification {
                peer_id: m.peer_id.clone(),
                credibility: m.credibility,
                computation_time: m.computation_time,
                distance: m.distance,
                coarse,
                group: assign_group(coarse, m.credibility, mu),
            })
        })
        .collect::<Result<Vec<_>, SelectionError>>()?;
    out.sort_by(|a, b| a.peer_id.cmp(&b.peer_id));
    Ok((Some(averages), out))
}

/// The efficient set: responders that land in PG1.
pub fn select_efficient(snapshots: &[PeerSnapshot], mu: f64) -> Result<BTreeSet<PeerId>, SelectionError> {
    let (_, classes) = classify_population(snapshots, mu)?;
    Ok(classes
        .into_iter()
        .filter(Classification::selected)
        .map(|c| c.peer_id)
        .collect())
}
