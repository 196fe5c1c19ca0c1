//! Neighbor-passage augmentation of retrieved lists.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::PassageStore;
use crate::rerank::PointwiseScorer;
use crate::retrieval::RankedList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    Prev,
    Next,
    #[default]
    Both,
}

pub fn augment_pass(list: &RankedList, top_k: usize) -> RankedList {
    list.truncated(top_k).with_producer("pass_passage_augmenter")
}

/// Input passages followed by their neighbors, first occurrence kept.
/// Neighbor ids missing from the store are skipped.
pub fn candidate_ids(list: &RankedList, store: &PassageStore, mode: NeighborMode) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in &list.entries {
        if seen.insert(e.passage_id.clone()) {
            out.push(e.passage_id.clone());
        }
    }
    for e in &list.entries {
        let Some(p) = store.get(&e.passage_id) else {
            continue;
        };
        let neighbors = match mode {
            NeighborMode::Prev => [p.prev_id.as_ref(), None],
            NeighborMode::Next => [None, p.next_id.as_ref()],
            NeighborMode::Both => [p.prev_id.as_ref(), p.next_id.as_ref()],
        };
        for id in neighbors.into_iter().flatten() {
            if store.get(id).is_none() {
                log::warn!("neighbor `{id}` of `{}` is not in the store; skipped", p.passage_id);
                continue;
            }
            if seen.insert(id.clone()) {
                out.push(id.clone());
            }
        }
    }
    out
}

/// Re-scores the originals and their neighbors uniformly with `scorer`
/// and keeps the best `top_k`.
pub fn augment_prev_next(
    list: &RankedList,
    query: &str,
    store: &PassageStore,
    mode: NeighborMode,
    scorer: &dyn PointwiseScorer,
    top_k: usize,
) -> RankedList {
    let scores = candidate_ids(list, store, mode)
        .into_iter()
        .filter_map(|id| {
            let Some(passage) = store.get(&id) else {
                log::warn!("passage `{id}` not in store; dropped");
                return None;
            };
            match scorer.score(query, passage) {
                Ok(s) => Some((id, s)),
                Err(err) => {
                    log::warn!("augmenter: scoring `{id}` failed ({err}); dropped");
                    None
                }
            }
        })
        .collect();
    RankedList::from_scores(&list.qid, "prev_next_augmenter", scores, top_k)
}
