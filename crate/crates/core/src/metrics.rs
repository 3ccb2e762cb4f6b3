//! Peer credibility and peer computation time.
//!
//! Credibility is the fraction of a peer's results that were correct,
//! `C_R / (E_R + C_R + I_R)`. Computation time is the idle time the peer
//! offers scaled by the fraction of it the peer was actually available,
//! `IT * A_P`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task_model::{PeerId, ResultKind, Seconds};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("observation horizon [{start}, {end}] has no length")]
    EmptyHorizon { start: Seconds, end: Seconds },
    #[error("interval [{start}, {end}] is reversed, overlaps its predecessor, or leaves the horizon")]
    BadInterval { start: Seconds, end: Seconds },
    #[error("availability {0} outside [0, 1]")]
    AvailabilityOutOfRange(f64),
    #[error("idle time {0} is negative")]
    NegativeIdleTime(f64),
}

/// Result tallies behind the credibility ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredibilityCounters {
    pub correct: u64,
    pub erroneous: u64,
    pub incomplete: u64,
}

impl CredibilityCounters {
    pub fn new(correct: u64, erroneous: u64, incomplete: u64) -> Self {
        Self {
            correct,
            erroneous,
            incomplete,
        }
    }

    /// Returns the counters with exactly one tally bumped.
    #[must_use]
    pub fn record_result(self, kind: ResultKind) -> Self {
        let mut next = self;
        next.record(kind);
        next
    }

    pub fn record(&mut self, kind: ResultKind) {
        match kind {
            ResultKind::Correct => self.correct += 1,
            ResultKind::Erroneous => self.erroneous += 1,
            ResultKind::Incomplete => self.incomplete += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.correct + self.erroneous + self.incomplete
    }

    /// `None` until at least one result has been recorded.
    pub fn credibility(&self) -> Option<f64> {
        credibility(self)
    }
}

/// `C_R / (E_R + C_R + I_R)`, or `None` when nothing has been observed.
pub fn credibility(counters: &CredibilityCounters) -> Option<f64> {
    match counters.total() {
        0 => None,
        total => Some(counters.correct as f64 / total as f64),
    }
}

/// Idle time offered by a peer and the fraction of it actually served.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvailabilityObservation {
    pub idle_time: Seconds,
    pub availability: f64,
}

impl AvailabilityObservation {
    pub fn new(idle_time: Seconds, availability: f64) -> Result<Self, MetricsError> {
        if !(idle_time >= 0.0) {
            return Err(MetricsError::NegativeIdleTime(idle_time));
        }
        if !(0.0..=1.0).contains(&availability) {
            return Err(MetricsError::AvailabilityOutOfRange(availability));
        }
        Ok(Self {
            idle_time,
            availability,
        })
    }
}

/// `PC_T = IT * A_P`.
pub fn computation_time(obs: &AvailabilityObservation) -> Seconds {
    obs.idle_time * obs.availability
}

/// Derives `(IT, A_P)` from the up-intervals a peer showed over `horizon`.
///
/// Intervals must be ordered, non-overlapping and inside the horizon.
pub fn estimate_availability(
    up_intervals: &[(Seconds, Seconds)],
    horizon: (Seconds, Seconds),
) -> Result<AvailabilityObservation, MetricsError> {
    let (h_start, h_end) = horizon;
    if !(h_end > h_start) {
        return Err(MetricsError::EmptyHorizon {
            start: h_start,
            end: h_end,
        });
    }
    let mut cursor = h_start;
    let mut up = 0.0;
    for &(start, end) in up_intervals {
        if start < cursor || end < start || end > h_end {
            return Err(MetricsError::BadInterval { start, end });
        }
        up += end - start;
        cursor = end;
    }
    let idle_time = h_end - h_start;
    Ok(AvailabilityObservation {
        idle_time,
        availability: (up / idle_time).clamp(0.0, 1.0),
    })
}

/// The observed triple used for classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerSnapshot {
    pub peer_id: PeerId,
    pub credibility: Option<f64>,
    pub computation_time: Seconds,
    /// Per-unit turnaround estimate.
    pub distance: Option<Seconds>,
}

impl PeerSnapshot {
    pub fn measured(peer_id: PeerId, credibility: f64, computation_time: Seconds, distance: Seconds) -> Self {
        Self {
            peer_id,
            credibility: Some(credibility),
            computation_time,
            distance: Some(distance),
        }
    }

    pub fn is_measured(&self) -> bool {
        self.credibility.is_some() && self.distance.is_some()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn record_single_increment() {
        let c = CredibilityCounters::default().record_result(ResultKind::Correct);
        assert_eq!(c, CredibilityCounters::new(1, 0, 0));
        let c = CredibilityCounters::new(2, 1, 0).record_result(ResultKind::Incomplete);
        assert_eq!(c, CredibilityCounters::new(2, 1, 1));
    }

    #[test]
    fn record_one_of_each_totals_three() {
        let c = CredibilityCounters::default()
            .record_result(ResultKind::Correct)
            .record_result(ResultKind::Erroneous)
            .record_result(ResultKind::Incomplete);
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn credibility_values() {
        assert_eq!(credibility(&CredibilityCounters::new(5, 0, 0)), Some(1.0));
        assert_eq!(credibility(&CredibilityCounters::new(0, 3, 2)), Some(0.0));
        let c = credibility(&CredibilityCounters::new(8, 1, 1)).unwrap();
        assert!((c - 0.8).abs() < 1e-12);
    }

    #[test]
    fn credibility_unmeasured_is_not_zero() {
        assert_eq!(credibility(&CredibilityCounters::default()), None);
    }

    #[test]
    fn computation_time_values() {
        let pct = |it, ap| computation_time(&AvailabilityObservation::new(it, ap).unwrap());
        assert_eq!(pct(100.0, 1.0), 100.0);
        assert_eq!(pct(100.0, 0.0), 0.0);
        assert!((pct(200.0, 0.75) - 150.0).abs() < 1e-12);
    }

    #[test]
    fn observation_rejects_bad_inputs() {
        assert!(AvailabilityObservation::new(-1.0, 0.5).is_err());
        assert!(AvailabilityObservation::new(1.0, 1.5).is_err());
        assert!(AvailabilityObservation::new(1.0, f64::NAN).is_err());
    }

    #[test]
    fn availability_from_intervals() {
        let none = estimate_availability(&[], (0.0, 100.0)).unwrap();
        assert_eq!((none.idle_time, none.availability), (100.0, 0.0));

        let full = estimate_availability(&[(0.0, 100.0)], (0.0, 100.0)).unwrap();
        assert_eq!(full.availability, 1.0);

        let half = estimate_availability(&[(0.0, 25.0), (50.0, 75.0)], (0.0, 100.0)).unwrap();
        assert_eq!(half.availability, 0.5);
    }

    #[test]
    fn availability_errors() {
        assert!(matches!(
            estimate_availability(&[], (5.0, 5.0)),
            Err(MetricsError::EmptyHorizon { .. })
        ));
        assert!(estimate_availability(&[(10.0, 20.0), (15.0, 30.0)], (0.0, 100.0)).is_err());
        assert!(estimate_availability(&[(90.0, 110.0)], (0.0, 100.0)).is_err());
        assert!(estimate_availability(&[(20.0, 10.0)], (0.0, 100.0)).is_err());
    }

    fn kind() -> impl Strategy<Value = ResultKind> {
        prop_oneof![
            Just(ResultKind::Correct),
            Just(ResultKind::Erroneous),
            Just(ResultKind::Incomplete),
        ]
    }

    proptest! {
        #[test]
        fn credibility_monotone_and_bounded(seq in proptest::collection::vec(kind(), 1..200)) {
            let mut c = CredibilityCounters::default();
            let mut prev: Option<f64> = None;
            for (i, k) in seq.iter().enumerate() {
                c.record(*k);
                prop_assert_eq!(c.total(), i as u64 + 1);
                let now = c.credibility().unwrap();
                prop_assert!((0.0..=1.0).contains(&now));
                if let Some(p) = prev {
                    match k {
                        ResultKind::Correct => prop_assert!(now >= p),
                        _ => prop_assert!(now <= p),
                    }
                }
                prev = Some(now);
            }
        }

        #[test]
        fn computation_time_linear_in_idle_time(it in 0.0f64..1e6, ap in 0.0f64..=1.0) {
            let one = computation_time(&AvailabilityObservation::new(it, ap).unwrap());
            let two = computation_time(&AvailabilityObservation::new(2.0 * it, ap).unwrap());
            prop_assert_eq!(two, 2.0 * one);
        }
    }
}
