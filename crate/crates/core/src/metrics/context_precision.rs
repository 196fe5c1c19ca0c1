use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::retrieval::RankedList;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceJudgment {
    pub qid: String,
    pub passage_id: String,
    pub relevant: bool,
    pub judge: String,
}

/// Mean of Precision@k over the relevant ranks within the first `k` flags.
/// Zero relevant passages gives 0.
pub fn context_precision_from_flags(flags: &[bool], k: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in flags.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// Context Precision@K of `ranked` under `judgments`. Lists shorter than
/// `k` are evaluated over the entries they have.
pub fn context_precision_at_k(
    ranked: &RankedList,
    judgments: &[RelevanceJudgment],
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    let lookup: HashMap<&str, bool> = judgments
        .iter()
        .filter(|j| j.qid == ranked.qid)
        .map(|j| (j.passage_id.as_str(), j.relevant))
        .collect();
    let flags = ranked
        .entries
        .iter()
        .take(k)
        .map(|e| {
            lookup.get(e.passage_id.as_str()).copied().ok_or_else(|| MetricError::MissingJudgment {
                qid: ranked.qid.clone(),
                passage_id: e.passage_id.clone(),
            })
        })
        .collect::<Result<Vec<bool>, _>>()?;
    Ok(context_precision_from_flags(&flags, k))
}
