//! Passage rerankers and the pointwise scorer contract.
//!
//! Every named reranker is one of three mechanisms: pass (truncate only),
//! pointwise (score each passage independently with a [`PointwiseScorer`]),
//! or listwise (ask an LLM for a permutation of the numbered passages).

use std::collections::HashSet;
use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Passage, PassageStore};
use crate::llm::{LlmClient, LlmConfig, LlmError};
use crate::retrieval::{DenseIndex, RankedList};
use crate::template::Template;
use crate::text::term_set;

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("reranker configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("passage `{0}` is not in the store")]
    MissingPassage(String),
    #[error("reranking needs a non-empty list")]
    EmptyList,
}

/// Relevance of one passage to a query; higher is more relevant.
pub trait PointwiseScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, query: &str, passage: &Passage) -> Result<f64, RerankError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Overlap,
    EmbeddingCosine,
    TrueToken,
    QueryLogprob,
    RemoteListwise,
}

/// Fraction of distinct query terms that occur in the passage.
#[derive(Debug, Clone, Copy, Default)]
pub struct OverlapScorer;

impl PointwiseScorer for OverlapScorer {
    fn name(&self) -> &str {
        "overlap"
    }

    fn score(&self, query: &str, passage: &Passage) -> Result<f64, RerankError> {
        let q = term_set(query);
        if q.is_empty() {
            return Ok(0.0);
        }
        let p = term_set(&passage.text);
        Ok(q.iter().filter(|t| p.contains(*t)).count() as f64 / q.len() as f64)
    }
}

/// Cosine between query and passage embeddings. Passage vectors come from
/// `index` when it holds them, otherwise they are embedded on demand.
pub struct EmbeddingCosineScorer {
    client: Arc<LlmClient>,
    cfg: LlmConfig,
    index: Option<Arc<DenseIndex>>,
    name: String,
}

impl EmbeddingCosineScorer {
    pub fn new(client: Arc<LlmClient>, cfg: LlmConfig, index: Option<Arc<DenseIndex>>) -> Self {
        let name = format!("embedding_cosine({})", cfg.model_name);
        EmbeddingCosineScorer {
            client,
            cfg,
            index,
            name,
        }
    }
}

impl PointwiseScorer for EmbeddingCosineScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, query: &str, passage: &Passage) -> Result<f64, RerankError> {
        let q = self.client.embed_one(query, &self.cfg)?;
        let indexed = self
            .index
            .as_ref()
            .filter(|ix| ix.model_name() == self.cfg.model_name)
            .and_then(|ix| ix.vector(&passage.passage_id).cloned());
        let p = match indexed {
            Some(v) => v,
            None => self.client.embed_one(&passage.text, &self.cfg)?,
        };
        if p.dim() != q.dim() {
            return Err(RerankError::Config(format!(
                "passage vector dimension {} differs from query dimension {}",
                p.dim(),
                q.dim()
            )));
        }
        Ok(q.cosine(&p).unwrap_or(f64::NEG_INFINITY))
    }
}

pub fn relevance_prompt(instruction: Option<&str>, query: &str, passage: &str) -> String {
    match instruction {
        Some(i) if !i.trim().is_empty() => format!("{i} Query: {query} Document: {passage} Relevant:"),
        _ => format!("Query: {query} Document: {passage} Relevant:"),
    }
}

/// Probability of `True` as the next token, renormalized against `False`.
pub struct TrueTokenScorer {
    client: Arc<LlmClient>,
    cfg: LlmConfig,
    instruction: Option<String>,
    name: String,
}

impl TrueTokenScorer {
    /// Fails when the endpoint cannot return log-probabilities.
    pub fn new(
        name: impl Into<String>,
        client: Arc<LlmClient>,
        cfg: LlmConfig,
        instruction: Option<String>,
    ) -> Result<Self, RerankError> {
        let name = name.into();
        if !client.supports_logprobs(&cfg) {
            return Err(RerankError::Config(format!(
                "`{name}` needs token log-probabilities, which endpoint {} does not expose",
                cfg.endpoint_url
            )));
        }
        Ok(TrueTokenScorer {
            client,
            cfg,
            instruction,
            name,
        })
    }
}

impl PointwiseScorer for TrueTokenScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, query: &str, passage: &Passage) -> Result<f64, RerankError> {
        let prompt = relevance_prompt(self.instruction.as_deref(), query, &passage.text);
        let lp = self.client.next_token_logprobs(&prompt, &["True", "False"], &self.cfg)?;
        let (t, f) = (lp[0], lp[1]);
        let m = t.max(f);
        Ok((t - m).exp() / ((t - m).exp() + (f - m).exp()))
    }
}

/// Log-probability of the query given the passage.
pub struct QueryLogprobScorer {
    client: Arc<LlmClient>,
    cfg: LlmConfig,
    name: String,
}

impl QueryLogprobScorer {
    pub fn new(name: impl Into<String>, client: Arc<LlmClient>, cfg: LlmConfig) -> Result<Self, RerankError> {
        let name = name.into();
        if !client.supports_logprobs(&cfg) {
            return Err(RerankError::Config(format!(
                "`{name}` needs token log-probabilities, which endpoint {} does not expose",
                cfg.endpoint_url
            )));
        }
        Ok(QueryLogprobScorer { client, cfg, name })
    }
}

impl PointwiseScorer for QueryLogprobScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, query: &str, passage: &Passage) -> Result<f64, RerankError> {
        let prefix = format!(
            "Passage: {}\nPlease write a question based on this passage.\nQuestion: ",
            passage.text
        );
        Ok(self.client.continuation_logprob(&prefix, query, &self.cfg)?)
    }
}

pub fn rerank_pass(list: &RankedList, top_k: usize) -> RankedList {
    list.truncated(top_k).with_producer("pass_reranker")
}

/// Scores every passage of `list` afresh and keeps the best `top_k`.
/// Passages the scorer fails on are dropped.
pub fn rerank_pointwise(
    list: &RankedList,
    query: &str,
    store: &PassageStore,
    scorer: &dyn PointwiseScorer,
    top_k: usize,
) -> RankedList {
    let scores = list
        .entries
        .iter()
        .filter_map(|e| {
            let Some(passage) = store.get(&e.passage_id) else {
                log::warn!("{}: passage `{}` not in store; dropped", scorer.name(), e.passage_id);
                return None;
            };
            match scorer.score(query, passage) {
                Ok(s) => Some((e.passage_id.clone(), s)),
                Err(err) => {
                    log::warn!("{}: scoring `{}` failed ({err}); dropped", scorer.name(), e.passage_id);
                    None
                }
            }
        })
        .collect();
    RankedList::from_scores(&list.qid, scorer.name(), scores, top_k)
}

pub fn default_listwise_template() -> &'static Template {
    static T: OnceLock<Template> = OnceLock::new();
    T.get_or_init(|| Template::new(include_str!("../prompts/rankgpt.txt"), &["passages"]).unwrap())
}

/// Zero-based indices in the order they first appear as `[i]` (1-based)
/// tokens. Repeats and out-of-range identifiers are ignored.
pub fn parse_permutation(text: &str, n: usize) -> Vec<usize> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\[(\d+)\]").unwrap());
    let mut seen = HashSet::new();
    re.captures_iter(text)
        .filter_map(|c| c[1].parse::<usize>().ok())
        .filter(|&i| i >= 1 && i <= n)
        .map(|i| i - 1)
        .filter(|&i| seen.insert(i))
        .collect()
}

/// Single-window permutation reranking. Passages the model leaves out keep
/// their input order after the ranked ones; an unparsable reply keeps the
/// input order. Scores are `(n - position) / n`.
pub fn rerank_listwise_llm(
    list: &RankedList,
    query: &str,
    store: &PassageStore,
    client: &LlmClient,
    cfg: &LlmConfig,
    top_k: usize,
) -> Result<RankedList, RerankError> {
    if list.is_empty() {
        return Err(RerankError::EmptyList);
    }
    let passages: Vec<&Passage> = list
        .entries
        .iter()
        .map(|e| store.get(&e.passage_id).ok_or_else(|| RerankError::MissingPassage(e.passage_id.clone())))
        .collect::<Result<_, _>>()?;
    let numbered: Vec<String> = passages
        .iter()
        .enumerate()
        .map(|(i, p)| format!("[{}] {}", i + 1, p.text.split_whitespace().collect::<Vec<_>>().join(" ")))
        .collect();
    let n = passages.len().to_string();
    let prompt = default_listwise_template().render(&[
        ("count", &n),
        ("query", query),
        ("passages", &numbered.join("\n")),
    ]);
    let reply = client.chat(&prompt, cfg)?;
    let mut order = parse_permutation(&reply.text, passages.len());
    if order.is_empty() {
        log::warn!("query `{}`: unparsable permutation; keeping input order", list.qid);
    }
    let placed: HashSet<usize> = order.iter().copied().collect();
    order.extend((0..passages.len()).filter(|i| !placed.contains(i)));
    let len = order.len() as f64;
    let scores = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| (passages[i].passage_id.clone(), (len - pos as f64) / len))
        .collect();
    Ok(RankedList::from_scores(&list.qid, "listwise_llm", scores, top_k))
}
