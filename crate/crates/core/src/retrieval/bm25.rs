//! Okapi BM25 over an inverted index.
//!
//! `score(q, d) = sum_t idf(t) * tf(t, d) * (k1 + 1) / (tf(t, d) + k1 * (1 - b + b * |d| / avgdl))`
//! with `idf(t) = ln(1 + (N - n_t + 0.5) / (n_t + 0.5))`, which stays
//! non-negative for terms present in most passages. Repeated query terms
//! contribute once per occurrence.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_snapshot, save_snapshot, RankedList, RetrievalError, Retriever};
use crate::corpus::PassageStore;
use crate::text::terms;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.5, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_doc_len: f64,
    /// term -> (document index, term frequency), ascending document index
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn build(store: &PassageStore, params: Bm25Params) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        if !(params.k1 >= 0.0 && (0.0..=1.0).contains(&params.b)) {
            return Err(RetrievalError::Config(format!(
                "bm25 needs k1 >= 0 and 0 <= b <= 1, got k1={} b={}",
                params.k1, params.b
            )));
        }
        let mut doc_ids = Vec::with_capacity(store.len());
        let mut doc_lens = Vec::with_capacity(store.len());
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for (doc, passage) in store.iter().enumerate() {
            let toks = terms(&passage.text);
            doc_ids.push(passage.passage_id.clone());
            doc_lens.push(toks.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in toks {
                *tf.entry(t).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((doc as u32, f));
            }
        }
        let total: u64 = doc_lens.iter().map(|&l| u64::from(l)).sum();
        let avg_doc_len = total as f64 / doc_lens.len() as f64;
        Ok(Bm25Index {
            params,
            doc_ids,
            doc_lens,
            avg_doc_len,
            postings,
        })
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.document_frequency(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of every passage, in store order.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let Bm25Params { k1, b } = self.params;
        let avgdl = if self.avg_doc_len > 0.0 { self.avg_doc_len } else { 1.0 };
        let mut scores = vec![0.0; self.doc_ids.len()];
        for term in terms(query) {
            let Some(list) = self.postings.get(&term) else { continue };
            let idf = self.idf(&term);
            for &(doc, tf) in list {
                let tf = f64::from(tf);
                let dl = f64::from(self.doc_lens[doc as usize]);
                scores[doc as usize] += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
            }
        }
        scores
    }

    /// Top `top_k` passages including zero-score ones; a query with no
    /// indexable terms yields an empty list.
    pub fn search(&self, qid: &str, query: &str, top_k: usize) -> RankedList {
        if terms(query).is_empty() {
            return RankedList::empty(qid, "bm25");
        }
        let scored = self.doc_ids.iter().cloned().zip(self.score_all(query)).collect();
        RankedList::from_scores(qid, "bm25", scored, top_k)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        save_snapshot(path, "bm25", self)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        load_snapshot(path, "bm25")
    }
}

impl Retriever for Bm25Index {
    fn name(&self) -> String {
        "bm25".into()
    }

    fn retrieve(&self, qid: &str, query: &str, top_k: usize) -> Result<RankedList, RetrievalError> {
        Ok(self.search(qid, query, top_k))
    }
}
