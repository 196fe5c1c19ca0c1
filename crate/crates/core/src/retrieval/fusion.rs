//! Hybrid fusion of a lexical and a semantic ranked list.
//!
//! * RRF: `1 / (eta + rank_lex) + 1 / (eta + rank_sem)`; a list that did not
//!   retrieve the passage contributes nothing.
//! * Convex: `alpha * norm_lex(score) + (1 - alpha) * norm_sem(score)`, each
//!   source normalized with its own statistics; a source that did not
//!   retrieve the passage contributes 0. Min-max normalization gives hybrid
//!   CC, three-sigma normalization gives DBSF.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{RankedList, RetrievalError, Retriever};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrfConfig {
    pub eta: f64,
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    MinMax,
    ThreeSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvexConfig {
    /// Weight of the lexical source.
    pub alpha: f64,
    pub normalization: Normalization,
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

impl NormalizationStats {
    /// Statistics over the finite values of `scores`; `None` if there are none.
    pub fn of(scores: &[f64]) -> Option<Self> {
        let finite: Vec<f64> = scores.iter().copied().filter(|s| s.is_finite()).collect();
        if finite.is_empty() {
            return None;
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Some(NormalizationStats {
            min: finite.iter().copied().fold(f64::INFINITY, f64::min),
            max: finite.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            stddev: var.sqrt(),
        })
    }

    /// Affine map into the normalized space. Values are not clamped.
    /// Degenerate statistics (all values equal) map everything to 1.0 under
    /// min-max and to 0.5 under three-sigma.
    pub fn apply(&self, method: Normalization, x: f64) -> f64 {
        match method {
            Normalization::MinMax => {
                let span = self.max - self.min;
                if span > 0.0 {
                    (x - self.min) / span
                } else {
                    1.0
                }
            }
            Normalization::ThreeSigma => {
                if self.stddev > 0.0 {
                    let lo = self.mean - 3.0 * self.stddev;
                    let hi = self.mean + 3.0 * self.stddev;
                    (x - lo) / (hi - lo)
                } else {
                    0.5
                }
            }
        }
    }
}

/// Normalizes `scores` with statistics taken from the finite entries.
pub fn normalize(scores: &[f64], method: Normalization) -> Vec<f64> {
    match NormalizationStats::of(scores) {
        Some(stats) => scores.iter().map(|&x| stats.apply(method, x)).collect(),
        None => scores.to_vec(),
    }
}

fn check_qid(lex: &RankedList, sem: &RankedList) -> Result<(), RetrievalError> {
    if lex.qid != sem.qid {
        return Err(RetrievalError::QidMismatch {
            lexical: lex.qid.clone(),
            semantic: sem.qid.clone(),
        });
    }
    Ok(())
}

pub fn fuse_rrf(lex: &RankedList, sem: &RankedList, cfg: &RrfConfig) -> Result<RankedList, RetrievalError> {
    check_qid(lex, sem)?;
    if !(cfg.eta.is_finite() && cfg.eta > 0.0) {
        return Err(RetrievalError::Config(format!("rrf eta must be > 0, got {}", cfg.eta)));
    }
    let mut fused: BTreeMap<&str, f64> = BTreeMap::new();
    for list in [lex, sem] {
        for e in &list.entries {
            *fused.entry(&e.passage_id).or_default() += 1.0 / (cfg.eta + e.rank as f64);
        }
    }
    let scores = fused.into_iter().map(|(id, s)| (id.to_string(), s)).collect();
    Ok(RankedList::from_scores(&lex.qid, format!("hybrid_rrf(eta={})", cfg.eta), scores, cfg.top_k))
}

/// Normalized scores of one source keyed by passage id. Non-finite scores are
/// treated as not retrieved.
fn normalized_source(list: &RankedList, method: Normalization) -> BTreeMap<&str, f64> {
    let finite: Vec<(&str, f64)> = list
        .entries
        .iter()
        .filter(|e| e.score.is_finite())
        .map(|e| (e.passage_id.as_str(), e.score))
        .collect();
    let raw: Vec<f64> = finite.iter().map(|(_, s)| *s).collect();
    finite.iter().map(|(id, _)| *id).zip(normalize(&raw, method)).collect()
}

pub fn fuse_convex(lex: &RankedList, sem: &RankedList, cfg: &ConvexConfig) -> Result<RankedList, RetrievalError> {
    check_qid(lex, sem)?;
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(RetrievalError::Config(format!("convex alpha must lie in [0, 1], got {}", cfg.alpha)));
    }
    let lex_n = normalized_source(lex, cfg.normalization);
    let sem_n = normalized_source(sem, cfg.normalization);
    let mut union: Vec<&str> = lex.entries.iter().chain(&sem.entries).map(|e| e.passage_id.as_str()).collect();
    union.sort_unstable();
    union.dedup();
    let scores = union
        .into_iter()
        .map(|id| {
            let l = lex_n.get(id).copied().unwrap_or(0.0);
            let s = sem_n.get(id).copied().unwrap_or(0.0);
            (id.to_string(), cfg.alpha * l + (1.0 - cfg.alpha) * s)
        })
        .collect();
    let producer = match cfg.normalization {
        Normalization::MinMax => format!("hybrid_cc(alpha={})", cfg.alpha),
        Normalization::ThreeSigma => format!("hybrid_dbsf(alpha={})", cfg.alpha),
    };
    Ok(RankedList::from_scores(&lex.qid, producer, scores, cfg.top_k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FusionMethod {
    Rrf { eta: f64 },
    Convex { alpha: f64, normalization: Normalization },
}

impl FusionMethod {
    pub fn fuse(&self, lex: &RankedList, sem: &RankedList, top_k: usize) -> Result<RankedList, RetrievalError> {
        match *self {
            FusionMethod::Rrf { eta } => fuse_rrf(lex, sem, &RrfConfig { eta, top_k }),
            FusionMethod::Convex { alpha, normalization } => fuse_convex(
                lex,
                sem,
                &ConvexConfig {
                    alpha,
                    normalization,
                    top_k,
                },
            ),
        }
    }
}

/// Runs both component retrievers at `top_k` and fuses their lists.
pub struct HybridRetriever<'a> {
    pub lexical: &'a dyn Retriever,
    pub semantic: &'a dyn Retriever,
    pub method: FusionMethod,
}

impl Retriever for HybridRetriever<'_> {
    fn name(&self) -> String {
        match self.method {
            FusionMethod::Rrf { eta } => format!("hybrid_rrf(eta={eta})"),
            FusionMethod::Convex { alpha, normalization: Normalization::MinMax } => format!("hybrid_cc(alpha={alpha})"),
            FusionMethod::Convex { alpha, normalization: Normalization::ThreeSigma } => {
                format!("hybrid_dbsf(alpha={alpha})")
            }
        }
    }

    fn retrieve(&self, qid: &str, query: &str, top_k: usize) -> Result<RankedList, RetrievalError> {
        let lex = self.lexical.retrieve(qid, query, top_k)?;
        let sem = self.semantic.retrieve(qid, query, top_k)?;
        self.method.fuse(&lex, &sem, top_k)
    }
}
