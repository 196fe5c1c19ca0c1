//! Lexical, dense and hybrid retrieval over a [`PassageStore`](crate::corpus::PassageStore).
//!
//! All producers emit [`RankedList`]s ordered by descending score with ties
//! broken by ascending passage id, so every stage downstream is deterministic.

mod bm25;
mod dense;
mod fusion;
mod snapshot;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::LlmError;

pub use bm25::{Bm25Index, Bm25Params};
pub use dense::{DenseIndex, DenseRetriever};
pub use fusion::{
    fuse_convex, fuse_rrf, normalize, ConvexConfig, FusionMethod, HybridRetriever, Normalization, NormalizationStats,
    RrfConfig,
};
pub use snapshot::{load_snapshot, save_snapshot, SNAPSHOT_VERSION};

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot fuse lists for different queries (`{lexical}` vs `{semantic}`)")]
    QidMismatch { lexical: String, semantic: String },
    #[error("index has no passages")]
    EmptyIndex,
    #[error("query vector has dimension {got}, index expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid retrieval parameter: {0}")]
    Config(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("index snapshot {path}: {message}")]
    Snapshot { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: String,
    #[serde(with = "score_serde")]
    pub score: f64,
    pub rank: usize,
}

/// Results for one query. Ranks run 1..=n without gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub qid: String,
    pub entries: Vec<RankedEntry>,
    pub producer: String,
}

/// Descending score, then ascending id. NaN sorts as negative infinity.
pub fn compare_scored(a_id: &str, a_score: f64, b_id: &str, b_score: f64) -> Ordering {
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    key(b_score)
        .total_cmp(&key(a_score))
        .then_with(|| a_id.cmp(b_id))
}

impl RankedList {
    pub fn empty(qid: impl Into<String>, producer: impl Into<String>) -> Self {
        RankedList {
            qid: qid.into(),
            entries: Vec::new(),
            producer: producer.into(),
        }
    }

    /// Sorts `(passage_id, score)` pairs, keeps the best `top_k` and assigns
    /// ranks. Ids must be unique.
    pub fn from_scores(
        qid: impl Into<String>,
        producer: impl Into<String>,
        mut scores: Vec<(String, f64)>,
        top_k: usize,
    ) -> Self {
        debug_assert!(
            {
                let mut ids: Vec<&String> = scores.iter().map(|(id, _)| id).collect();
                ids.sort();
                ids.windows(2).all(|w| w[0] != w[1])
            },
            "duplicate passage id"
        );
        scores.sort_by(|a, b| compare_scored(&a.0, a.1, &b.0, b.1));
        scores.truncate(top_k);
        RankedList {
            qid: qid.into(),
            entries: scores
                .into_iter()
                .enumerate()
                .map(|(i, (passage_id, score))| RankedEntry {
                    passage_id,
                    score,
                    rank: i + 1,
                })
                .collect(),
            producer: producer.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.passage_id.as_str()).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn rank_of(&self, passage_id: &str) -> Option<usize> {
        self.entries.iter().find(|e| e.passage_id == passage_id).map(|e| e.rank)
    }

    pub fn score_of(&self, passage_id: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.passage_id == passage_id).map(|e| e.score)
    }

    /// First `k` entries; ranks are unchanged.
    pub fn truncated(&self, k: usize) -> RankedList {
        RankedList {
            qid: self.qid.clone(),
            entries: self.entries.iter().take(k).cloned().collect(),
            producer: self.producer.clone(),
        }
    }

    pub fn with_producer(mut self, producer: impl Into<String>) -> Self {
        self.producer = producer.into();
        self
    }

    /// True when ranks are 1..=n, scores non-increasing, ids unique.
    pub fn is_well_formed(&self) -> bool {
        let mut ids = std::collections::HashSet::new();
        self.entries.iter().enumerate().all(|(i, e)| e.rank == i + 1 && ids.insert(&e.passage_id))
            && self.entries.windows(2).all(|w| {
                compare_scored(&w[0].passage_id, w[0].score, &w[1].passage_id, w[1].score) != Ordering::Greater
            })
    }
}

/// Anything that maps a query text to ranked passages.
pub trait Retriever: Sync {
    fn name(&self) -> String;
    fn retrieve(&self, qid: &str, query: &str, top_k: usize) -> Result<RankedList, RetrievalError>;
}

/// JSON has no infinities; `-inf` scores (zero-norm vectors) travel as null.
mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_ascending_id() {
        let list = RankedList::from_scores(
            "q",
            "t",
            vec![("b".into(), 1.0), ("a".into(), 1.0), ("c".into(), 2.0), ("d".into(), f64::NEG_INFINITY)],
            10,
        );
        assert_eq!(list.ids(), vec!["c", "a", "b", "d"]);
        assert!(list.is_well_formed());
        assert_eq!(list.rank_of("b"), Some(3));
    }

    #[test]
    fn truncation_keeps_best() {
        let list = RankedList::from_scores("q", "t", vec![("a".into(), 1.0), ("b".into(), 3.0)], 1);
        assert_eq!(list.ids(), vec!["b"]);
    }

    #[test]
    fn negative_infinity_survives_json() {
        let list = RankedList::from_scores("q", "t", vec![("a".into(), f64::NEG_INFINITY)], 1);
        let json = serde_json::to_string(&list).unwrap();
        let back: RankedList = serde_json::from_str(&json).unwrap();
        assert_eq!(back.entries[0].score, f64::NEG_INFINITY);
    }
}
