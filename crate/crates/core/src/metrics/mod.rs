//! Retrieval and generation metrics, and the cross-module aggregate used to
//! pick a generation-side winner.

mod context_precision;
mod judge;
mod ngram;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;

pub use context_precision::{context_precision_at_k, context_precision_from_flags, RelevanceJudgment};
pub use judge::{
    g_eval, g_eval_aspect, parse_g_eval_score, parse_verdict, sem_score, GEvalAspect, GoldJudge, LlmJudge,
    RelevanceJudge, SemScoreMapping,
};
pub use ngram::{lcs_len, meteor, rouge, rouge_l, rouge_n, RougeVariant};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("query `{qid}`: no relevance judgment for passage `{passage_id}`")]
    MissingJudgment { qid: String, passage_id: String },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("query `{qid}` has no gold passages")]
    NoGold { qid: String },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ContextPrecision,
    Rouge,
    Meteor,
    SemScore,
    GEval,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ContextPrecision => "context_precision",
            Metric::Rouge => "rouge",
            Metric::Meteor => "meteor",
            Metric::SemScore => "sem_score",
            Metric::GEval => "g_eval",
        }
    }

    pub fn scale(self) -> (f64, f64) {
        match self {
            Metric::GEval => (1.0, 5.0),
            _ => (0.0, 1.0),
        }
    }

    pub fn is_retrieval(self) -> bool {
        self == Metric::ContextPrecision
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "context_precision" => Metric::ContextPrecision,
            "rouge" => Metric::Rouge,
            "meteor" => Metric::Meteor,
            "sem_score" => Metric::SemScore,
            "g_eval" => Metric::GEval,
            other => return Err(MetricError::UnknownMetric(other.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub metric: Metric,
    pub qid: String,
    pub value: f64,
}

impl MetricScore {
    pub fn scale(&self) -> (f64, f64) {
        self.metric.scale()
    }
}

/// Min-max normalization across candidates; all-equal inputs map to 1.0.
pub fn min_max_across(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

/// Per-module selection values: each metric's module means are min-max
/// normalized across modules, then averaged. Metrics absent from any module
/// are left out for every module.
pub fn aggregate_generation(module_means: &[BTreeMap<Metric, f64>]) -> Vec<f64> {
    let Some(first) = module_means.first() else {
        return Vec::new();
    };
    let shared: Vec<Metric> = first
        .keys()
        .copied()
        .filter(|m| module_means.iter().all(|mm| mm.get(m).is_some_and(|v| v.is_finite())))
        .collect();
    for mm in module_means {
        for m in mm.keys().filter(|m| !shared.contains(m)) {
            log::warn!("metric `{m}` missing for some candidates; left out of the aggregate");
        }
    }
    if shared.is_empty() {
        return vec![1.0; module_means.len()];
    }
    let mut totals = vec![0.0; module_means.len()];
    for m in &shared {
        let raw: Vec<f64> = module_means.iter().map(|mm| mm[m]).collect();
        for (t, n) in totals.iter_mut().zip(min_max_across(&raw)) {
            *t += n;
        }
    }
    totals.into_iter().map(|t| t / shared.len() as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn means(pairs: &[(Metric, f64)]) -> BTreeMap<Metric, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn single_module_aggregates_to_one() {
        assert_eq!(aggregate_generation(&[means(&[(Metric::Rouge, 0.1), (Metric::GEval, 2.0)])]), vec![1.0]);
    }

    #[test]
    fn dominating_module_gets_one_and_zero() {
        let a = means(&[(Metric::Rouge, 0.5), (Metric::Meteor, 0.5)]);
        let b = means(&[(Metric::Rouge, 0.2), (Metric::Meteor, 0.1)]);
        assert_eq!(aggregate_generation(&[a, b]), vec![1.0, 0.0]);
    }

    #[test]
    fn metric_missing_for_one_module_is_skipped() {
        let a = means(&[(Metric::Rouge, 0.5), (Metric::GEval, 1.0)]);
        let b = means(&[(Metric::Rouge, 0.2)]);
        assert_eq!(aggregate_generation(&[a, b]), vec![1.0, 0.0]);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in [Metric::ContextPrecision, Metric::Rouge, Metric::Meteor, Metric::SemScore, Metric::GEval] {
            assert_eq!(m.as_str().parse::<Metric>().unwrap(), m);
        }
        assert!("bleu".parse::<Metric>().is_err());
    }
}
