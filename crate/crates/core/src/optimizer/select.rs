use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{aggregate_generation, Metric};

/// Elapsed-time tie-breaks compare times rounded to this many seconds, so
/// timer noise does not decide between equal candidates.
pub const ELAPSED_RESOLUTION_SECONDS: f64 = 0.01;

/// What selection needs to know about one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub means: BTreeMap<Metric, f64>,
    pub mean_elapsed_seconds: f64,
    pub disqualified: bool,
}

impl Scored {
    pub fn new(means: impl IntoIterator<Item = (Metric, f64)>, mean_elapsed_seconds: f64) -> Self {
        Scored {
            means: means.into_iter().collect(),
            mean_elapsed_seconds,
            disqualified: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub winner: usize,
    /// Strategy value per candidate; `None` when excluded.
    pub values: Vec<Option<f64>>,
    pub excluded: Vec<Option<String>>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SelectError {
    #[error("no candidate is eligible: {0}")]
    NoneEligible(String),
}

/// Picks the best candidate under `metrics`.
///
/// Candidates that are disqualified, slower than `speed_threshold_seconds`
/// or missing every strategy metric are excluded first. A single metric is
/// compared on its raw mean; several metrics are min-max normalized across
/// the eligible candidates and averaged. Ties go to the lower rounded mean
/// elapsed time, then to declaration order, or to a seeded shuffle of it
/// when `seed` is given.
pub fn select(
    candidates: &[Scored],
    metrics: &[Metric],
    speed_threshold_seconds: Option<f64>,
    seed: Option<u64>,
) -> Result<Selection, SelectError> {
    let mut excluded: Vec<Option<String>> = candidates
        .iter()
        .map(|c| {
            if c.disqualified {
                return Some("disqualified".to_string());
            }
            if let Some(limit) = speed_threshold_seconds {
                if c.mean_elapsed_seconds > limit {
                    return Some("slower than the speed threshold".to_string());
                }
            }
            if !metrics.iter().any(|m| c.means.get(m).is_some_and(|v| v.is_finite())) {
                return Some("no strategy metric available".to_string());
            }
            None
        })
        .collect();
    let eligible: Vec<usize> = (0..candidates.len()).filter(|&i| excluded[i].is_none()).collect();
    if eligible.is_empty() {
        let reasons: Vec<String> = excluded.iter().flatten().cloned().collect();
        return Err(SelectError::NoneEligible(if reasons.is_empty() {
            "no candidates".into()
        } else {
            reasons.join("; ")
        }));
    }
    let mut values = vec![None; candidates.len()];
    if metrics.len() == 1 {
        for &i in &eligible {
            values[i] = candidates[i].means.get(&metrics[0]).copied();
        }
    } else {
        let means: Vec<BTreeMap<Metric, f64>> = eligible
            .iter()
            .map(|&i| {
                metrics
                    .iter()
                    .filter_map(|m| candidates[i].means.get(m).map(|v| (*m, *v)))
                    .collect()
            })
            .collect();
        for (&i, v) in eligible.iter().zip(aggregate_generation(&means)) {
            values[i] = Some(v);
        }
    }
    let mut priority: Vec<usize> = (0..candidates.len()).collect();
    if let Some(seed) = seed {
        priority.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let rank_of = |i: usize| priority.iter().position(|&p| p == i).unwrap_or(i);
    let quantized = |i: usize| (candidates[i].mean_elapsed_seconds / ELAPSED_RESOLUTION_SECONDS).round() as i64;
    let winner = *eligible
        .iter()
        .max_by(|&&a, &&b| {
            let (va, vb) = (values[a].unwrap_or(f64::NEG_INFINITY), values[b].unwrap_or(f64::NEG_INFINITY));
            va.total_cmp(&vb)
                .then_with(|| quantized(b).cmp(&quantized(a)))
                .then_with(|| rank_of(b).cmp(&rank_of(a)))
        })
        .expect("eligible is non-empty");
    for i in 0..candidates.len() {
        if excluded[i].is_none() && values[i].is_none() {
            excluded[i] = Some("no strategy value".into());
        }
    }
    Ok(Selection {
        winner,
        values,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(values: &[f64]) -> Vec<Scored> {
        values.iter().map(|&v| Scored::new([(Metric::ContextPrecision, v)], 0.0)).collect()
    }

    #[test]
    fn single_candidate_wins() {
        let s = select(&cp(&[0.1]), &[Metric::ContextPrecision], None, None).unwrap();
        assert_eq!(s.winner, 0);
    }

    #[test]
    fn ties_go_to_faster_then_earlier() {
        let mut c = cp(&[0.5, 0.5, 0.5]);
        c[0].mean_elapsed_seconds = 0.5;
        c[1].mean_elapsed_seconds = 0.1;
        c[2].mean_elapsed_seconds = 0.1;
        assert_eq!(select(&c, &[Metric::ContextPrecision], None, None).unwrap().winner, 1);
        let c = cp(&[0.5, 0.5]);
        assert_eq!(select(&c, &[Metric::ContextPrecision], None, None).unwrap().winner, 0);
    }

    #[test]
    fn seeded_shuffle_is_reproducible() {
        let c = cp(&[0.5; 6]);
        let a = select(&c, &[Metric::ContextPrecision], None, Some(7)).unwrap().winner;
        let b = select(&c, &[Metric::ContextPrecision], None, Some(7)).unwrap().winner;
        assert_eq!(a, b);
    }

    #[test]
    fn speed_threshold_filters_before_argmax() {
        let mut c = cp(&[0.9, 0.5]);
        c[0].mean_elapsed_seconds = 2.0;
        c[1].mean_elapsed_seconds = 0.5;
        let s = select(&c, &[Metric::ContextPrecision], Some(1.0), None).unwrap();
        assert_eq!(s.winner, 1);
        assert!(s.excluded[0].is_some());
        assert!(select(&c, &[Metric::ContextPrecision], Some(0.1), None).is_err());
    }

    #[test]
    fn disqualified_never_wins() {
        let mut c = cp(&[0.9, 0.1]);
        c[0].disqualified = true;
        assert_eq!(select(&c, &[Metric::ContextPrecision], None, None).unwrap().winner, 1);
        c[1].disqualified = true;
        assert!(select(&c, &[Metric::ContextPrecision], None, None).is_err());
    }
}
