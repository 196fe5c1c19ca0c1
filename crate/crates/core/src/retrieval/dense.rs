use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_snapshot, save_snapshot, RankedList, RetrievalError, Retriever};
use crate::corpus::PassageStore;
use crate::llm::{Embedding, LlmClient, LlmConfig};

const EMBED_BATCH: usize = 64;

/// Exhaustive cosine-similarity index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    model_name: String,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Embedding>,
    #[serde(skip)]
    positions: HashMap<String, usize>,
}

impl DenseIndex {
    pub fn build(store: &PassageStore, client: &LlmClient, cfg: &LlmConfig) -> Result<Self, RetrievalError> {
        if store.is_empty() {
            return Err(RetrievalError::EmptyIndex);
        }
        let passages: Vec<_> = store.iter().collect();
        let mut ids = Vec::with_capacity(passages.len());
        let mut vectors = Vec::with_capacity(passages.len());
        for batch in passages.chunks(EMBED_BATCH) {
            let texts: Vec<String> = batch.iter().map(|p| p.text.clone()).collect();
            let embedded = client.embed(&texts, cfg)?;
            ids.extend(batch.iter().map(|p| p.passage_id.clone()));
            vectors.extend(embedded);
        }
        Self::from_vectors(cfg.model_name.clone(), ids, vectors)
    }

    pub fn from_vectors(
        model_name: String,
        ids: Vec<String>,
        vectors: Vec<Embedding>,
    ) -> Result<Self, RetrievalError> {
        let dim = vectors.first().ok_or(RetrievalError::EmptyIndex)?.dim();
        if let Some(bad) = vectors.iter().find(|v| v.dim() != dim) {
            return Err(RetrievalError::DimensionMismatch { expected: dim, got: bad.dim() });
        }
        let mut index = DenseIndex {
            model_name,
            dim,
            ids,
            vectors,
            positions: HashMap::new(),
        };
        index.reindex();
        Ok(index)
    }

    fn reindex(&mut self) {
        self.positions = self.ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, passage_id: &str) -> Option<&Embedding> {
        self.positions.get(passage_id).map(|&i| &self.vectors[i])
    }

    /// Cosine similarity of the query to every passage; zero-norm vectors on
    /// either side score negative infinity.
    pub fn score_vector(&self, query: &Embedding) -> Result<Vec<f64>, RetrievalError> {
        if query.dim() != self.dim {
            return Err(RetrievalError::DimensionMismatch { expected: self.dim, got: query.dim() });
        }
        let mut warned = false;
        Ok(self
            .vectors
            .iter()
            .zip(&self.ids)
            .map(|(v, id)| match query.cosine(v) {
                Some(c) => c,
                None => {
                    if !warned {
                        log::warn!("zero-norm vector while scoring `{id}`; placing it last");
                        warned = true;
                    }
                    f64::NEG_INFINITY
                }
            })
            .collect())
    }

    pub fn search_vector(&self, qid: &str, query: &Embedding, top_k: usize) -> Result<RankedList, RetrievalError> {
        let scores = self.score_vector(query)?;
        Ok(RankedList::from_scores(qid, "vectordb", self.ids.iter().cloned().zip(scores).collect(), top_k))
    }

    pub fn search(
        &self,
        qid: &str,
        query: &str,
        client: &LlmClient,
        cfg: &LlmConfig,
        top_k: usize,
    ) -> Result<RankedList, RetrievalError> {
        let v = client.embed_one(query, cfg)?;
        self.search_vector(qid, &v, top_k)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        save_snapshot(path, "dense", self)
    }

    pub fn load(path: &Path) -> Result<Self, RetrievalError> {
        let mut index: DenseIndex = load_snapshot(path, "dense")?;
        index.reindex();
        Ok(index)
    }
}

/// A [`DenseIndex`] paired with the client that embeds queries.
pub struct DenseRetriever<'a> {
    pub index: &'a DenseIndex,
    pub client: &'a LlmClient,
    pub cfg: &'a LlmConfig,
}

impl Retriever for DenseRetriever<'_> {
    fn name(&self) -> String {
        "vectordb".into()
    }

    fn retrieve(&self, qid: &str, query: &str, top_k: usize) -> Result<RankedList, RetrievalError> {
        self.index.search(qid, query, self.client, self.cfg, top_k)
    }
}
