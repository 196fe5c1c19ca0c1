//! Module execution shared by the optimizer and single-query serving.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_pass, augment_prev_next};
use crate::config::{Module, NodeKind, PipelineConfig, RunSettings, Sections};
use crate::corpus::{load_corpus, CorpusError, PassageStore};
use crate::expansion::{expand_decompose, expand_hyde, expand_pass, merge_max_score, ExpandedQuery};
use crate::llm::{HttpBackend, LlmClient, LlmConfig, ResponseCache, RetryPolicy};
use crate::prompt::{generate, make_prompt, passage_texts, PromptStyle, PromptTemplate};
use crate::rerank::{
    rerank_listwise_llm, rerank_pass, rerank_pointwise, EmbeddingCosineScorer, OverlapScorer, PointwiseScorer,
    QueryLogprobScorer, ScorerKind, TrueTokenScorer,
};
use crate::retrieval::{Bm25Index, Bm25Params, DenseIndex, RankedList};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{node}: {message}")]
    Node { node: NodeKind, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Setup(String),
}

fn node_err(node: NodeKind) -> impl Fn(String) -> PipelineError {
    move |message| PipelineError::Node { node, message }
}

/// Everything known about one query as it moves through the nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryState {
    pub qid: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expanded: Option<ExpandedQuery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list: Option<RankedList>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl QueryState {
    pub fn new(qid: impl Into<String>, question: impl Into<String>) -> Self {
        QueryState {
            qid: qid.into(),
            question: question.into(),
            expanded: None,
            list: None,
            prompt: None,
            answer: None,
        }
    }

    fn expanded_or_pass(&self) -> Result<ExpandedQuery, String> {
        match &self.expanded {
            Some(e) => Ok(e.clone()),
            None => expand_pass(&self.qid, &self.question).map_err(|e| e.to_string()),
        }
    }

    fn list_or_err(&self) -> Result<&RankedList, String> {
        self.list.as_ref().ok_or_else(|| "no ranked list from an upstream node".to_string())
    }
}

type ComponentKey = (String, String, usize);

/// Indexes, component-list cache and the model client.
pub struct Engine {
    pub store: Arc<PassageStore>,
    pub client: Arc<LlmClient>,
    pub sections: Sections,
    bm25: Mutex<HashMap<String, Arc<Bm25Index>>>,
    dense: Mutex<HashMap<String, Arc<DenseIndex>>>,
    components: Mutex<HashMap<ComponentKey, (RankedList, f64)>>,
}

/// The model client for a run: the deterministic mock, or HTTP with the
/// configured cache, rate limit and retries.
pub fn build_client(run: &RunSettings, mock: bool) -> Result<LlmClient, PipelineError> {
    // Mock replies never go to the cache file, so they cannot be served
    // to a later run against a real endpoint.
    if mock {
        return Ok(LlmClient::mock().with_cache(ResponseCache::in_memory()));
    }
    let cache = match &run.cache {
        Some(path) => ResponseCache::open(path).map_err(|e| PipelineError::Setup(e.to_string()))?,
        None => ResponseCache::in_memory(),
    };
    let mut client = LlmClient::new(Arc::new(HttpBackend::default()))
        .with_cache(cache)
        .with_retry(RetryPolicy {
            attempts: run.retry_attempts,
            ..RetryPolicy::default()
        });
    if let Some(rps) = run.requests_per_second {
        client = client.with_rate_limit(rps);
    }
    Ok(client)
}

impl Engine {
    pub fn new(store: Arc<PassageStore>, client: Arc<LlmClient>, sections: Sections) -> Self {
        Engine {
            store,
            client,
            sections,
            bm25: Mutex::new(HashMap::new()),
            dense: Mutex::new(HashMap::new()),
            components: Mutex::new(HashMap::new()),
        }
    }

    pub fn bm25_index(&self, params: Bm25Params) -> Result<Arc<Bm25Index>, String> {
        let key = format!("{}:{}", params.k1, params.b);
        let mut map = self.bm25.lock().unwrap();
        if let Some(ix) = map.get(&key) {
            return Ok(ix.clone());
        }
        let ix = Arc::new(Bm25Index::build(&self.store, params).map_err(|e| e.to_string())?);
        map.insert(key, ix.clone());
        Ok(ix)
    }

    pub fn dense_index(&self, cfg: &LlmConfig) -> Result<Arc<DenseIndex>, String> {
        let mut map = self.dense.lock().unwrap();
        if let Some(ix) = map.get(&cfg.model_name) {
            return Ok(ix.clone());
        }
        let ix = Arc::new(DenseIndex::build(&self.store, &self.client, cfg).map_err(|e| e.to_string())?);
        map.insert(cfg.model_name.clone(), ix.clone());
        Ok(ix)
    }

    fn dense_if_built(&self, model: &str) -> Option<Arc<DenseIndex>> {
        self.dense.lock().unwrap().get(model).cloned()
    }

    /// A component retrieval with the seconds it took when first computed.
    fn component(&self, key: ComponentKey, run: impl FnOnce() -> Result<RankedList, String>) -> Result<(RankedList, f64), String> {
        if let Some(hit) = self.components.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let start = Instant::now();
        let list = run()?;
        let value = (list, start.elapsed().as_secs_f64());
        self.components.lock().unwrap().entry(key).or_insert(value.clone());
        Ok(value)
    }

    fn bm25_list(&self, params: Bm25Params, qid: &str, text: &str, k: usize) -> Result<(RankedList, f64), String> {
        let ix = self.bm25_index(params)?;
        let key = (format!("bm25:{}:{}:{qid}", params.k1, params.b), text.to_string(), k);
        self.component(key, || Ok(ix.search(qid, text, k)))
    }

    fn dense_list(&self, cfg: &LlmConfig, qid: &str, text: &str, k: usize) -> Result<(RankedList, f64), String> {
        let ix = self.dense_index(cfg)?;
        let key = (format!("vectordb:{}:{qid}", cfg.model_name), text.to_string(), k);
        self.component(key, || ix.search(qid, text, &self.client, cfg, k).map_err(|e| e.to_string()))
    }

    /// Runs the retrieval module once per query variant, merging variants
    /// by maximum score.
    fn retrieve(&self, module: &Module, eq: &ExpandedQuery, k: usize) -> Result<(RankedList, f64), String> {
        let mut lists = Vec::with_capacity(eq.variants.len());
        let mut seconds = 0.0;
        for v in &eq.variants {
            let (list, secs) = match module {
                Module::Bm25(params) => self.bm25_list(*params, &eq.qid, v, k)?,
                Module::VectorDb { embedding } => self.dense_list(embedding, &eq.qid, v, k)?,
                Module::Hybrid { method, embedding } => {
                    let (lex, a) = self.bm25_list(Bm25Params::default(), &eq.qid, v, k)?;
                    let (sem, b) = self.dense_list(embedding, &eq.qid, v, k)?;
                    let start = Instant::now();
                    let fused = method.fuse(&lex, &sem, k).map_err(|e| e.to_string())?;
                    (fused, a + b + start.elapsed().as_secs_f64())
                }
                other => return Err(format!("{other:?} is not a retrieval module")),
            };
            seconds += secs;
            lists.push(list);
        }
        if lists.len() == 1 {
            return Ok((lists.remove(0), seconds));
        }
        let producer = lists[0].producer.clone();
        Ok((merge_max_score(&eq.qid, &producer, &lists, k), seconds))
    }

    fn scorer(&self, name: &str, kind: ScorerKind, llm: &LlmConfig, instruction: &Option<String>) -> Result<Box<dyn PointwiseScorer>, String> {
        let client = self.client.clone();
        Ok(match kind {
            ScorerKind::Overlap => Box::new(OverlapScorer),
            ScorerKind::EmbeddingCosine => {
                Box::new(EmbeddingCosineScorer::new(client, llm.clone(), self.dense_if_built(&llm.model_name)))
            }
            ScorerKind::TrueToken => Box::new(
                TrueTokenScorer::new(name, client, llm.clone(), instruction.clone()).map_err(|e| e.to_string())?,
            ),
            ScorerKind::QueryLogprob => {
                Box::new(QueryLogprobScorer::new(name, client, llm.clone()).map_err(|e| e.to_string())?)
            }
            ScorerKind::RemoteListwise => return Err("listwise reranking has no pointwise scorer".into()),
        })
    }

    /// Applies one module to a query state. Returns the new state and the
    /// module's elapsed seconds.
    pub fn apply(
        &self,
        node: NodeKind,
        module: &Module,
        top_k: usize,
        state: &QueryState,
    ) -> Result<(QueryState, f64), String> {
        if node_of(module) != node {
            return Err(format!("module does not belong to node `{node}`"));
        }
        let start = Instant::now();
        let mut out = state.clone();
        // Retrieval reports component time as first measured, so a cached
        // component list costs the same as a fresh one.
        let mut measured = None;
        match module {
            Module::PassQueryExpansion => {
                out.expanded = Some(expand_pass(&state.qid, &state.question).map_err(|e| e.to_string())?);
            }
            Module::QueryDecompose { llm, template } => {
                let eq = expand_decompose(&state.qid, &state.question, &self.client, llm, template.as_ref());
                out.expanded = Some(eq.map_err(|e| e.to_string())?);
            }
            Module::Hyde { llm, template } => {
                let eq = expand_hyde(&state.qid, &state.question, &self.client, llm, template.as_ref());
                out.expanded = Some(eq.map_err(|e| e.to_string())?);
            }
            Module::Bm25(_) | Module::VectorDb { .. } | Module::Hybrid { .. } => {
                let eq = state.expanded_or_pass()?;
                let (list, seconds) = self.retrieve(module, &eq, top_k)?;
                measured = Some(seconds);
                out.list = Some(list);
            }
            Module::PassAugmenter => out.list = Some(augment_pass(state.list_or_err()?, top_k)),
            Module::PrevNext { mode, embedding } => {
                let index = self.dense_index(embedding)?;
                let scorer = EmbeddingCosineScorer::new(self.client.clone(), embedding.clone(), Some(index));
                out.list = Some(augment_prev_next(
                    state.list_or_err()?,
                    &state.question,
                    &self.store,
                    *mode,
                    &scorer,
                    top_k,
                ));
            }
            Module::PassReranker => out.list = Some(rerank_pass(state.list_or_err()?, top_k)),
            Module::Pointwise {
                name,
                scorer,
                llm,
                instruction,
            } => {
                let scorer = self.scorer(name, *scorer, llm, instruction)?;
                let list = rerank_pointwise(state.list_or_err()?, &state.question, &self.store, scorer.as_ref(), top_k);
                out.list = Some(list.with_producer(name.clone()));
            }
            Module::Listwise { llm } => {
                let input = state.list_or_err()?;
                out.list = Some(if input.is_empty() {
                    input.clone()
                } else {
                    rerank_listwise_llm(input, &state.question, &self.store, &self.client, llm, top_k)
                        .map_err(|e| e.to_string())?
                });
            }
            Module::Prompt { style, template } => {
                let texts = passage_texts(state.list_or_err()?, &self.store);
                out.prompt = Some(make_prompt(*style, template, &texts, &state.question));
            }
            Module::Generator { llm } => {
                let prompt = match &state.prompt {
                    Some(p) => p.clone(),
                    None => default_prompt(state, &self.store)?,
                };
                out.prompt = Some(prompt.clone());
                out.answer = Some(generate(&prompt, &self.client, llm).map_err(|e| e.to_string())?.answer);
            }
        }
        Ok((out, measured.unwrap_or_else(|| start.elapsed().as_secs_f64())))
    }
}

fn default_prompt(state: &QueryState, store: &PassageStore) -> Result<String, String> {
    let texts = passage_texts(state.list_or_err()?, store);
    Ok(make_prompt(PromptStyle::FString, &PromptTemplate::default(), &texts, &state.question))
}

pub fn node_of(module: &Module) -> NodeKind {
    match module {
        Module::PassQueryExpansion | Module::QueryDecompose { .. } | Module::Hyde { .. } => NodeKind::QueryExpansion,
        Module::Bm25(_) | Module::VectorDb { .. } | Module::Hybrid { .. } => NodeKind::Retrieval,
        Module::PassAugmenter | Module::PrevNext { .. } => NodeKind::PassageAugmenter,
        Module::PassReranker | Module::Pointwise { .. } | Module::Listwise { .. } => NodeKind::PassageReranker,
        Module::Prompt { .. } => NodeKind::PromptMaker,
        Module::Generator { .. } => NodeKind::Generator,
    }
}

/// Output a node forwards for a query its winning module failed on.
pub fn pass_through(node: NodeKind, top_k: usize, state: &QueryState, store: &PassageStore) -> QueryState {
    let mut out = state.clone();
    match node {
        NodeKind::QueryExpansion => out.expanded = expand_pass(&state.qid, &state.question).ok(),
        NodeKind::Retrieval => out.list = Some(RankedList::empty(&state.qid, "failed")),
        NodeKind::PassageAugmenter | NodeKind::PassageReranker => {
            out.list = Some(
                state
                    .list
                    .as_ref()
                    .map_or_else(|| RankedList::empty(&state.qid, "failed"), |l| l.truncated(top_k)),
            )
        }
        NodeKind::PromptMaker => out.prompt = default_prompt(state, store).ok(),
        NodeKind::Generator => out.answer = Some(String::new()),
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineAnswer {
    pub answer: String,
    pub passage_ids: Vec<String>,
    /// True when retrieval returned nothing and the answer had no context.
    pub empty_context: bool,
}

/// A loaded winning pipeline.
pub struct Pipeline {
    config: PipelineConfig,
    engine: Engine,
}

impl Pipeline {
    pub fn load(path: &Path, mock: bool) -> Result<Pipeline, PipelineError> {
        let config = PipelineConfig::from_file(path).map_err(|e| PipelineError::Setup(e.to_string()))?;
        Pipeline::new(config, mock)
    }

    pub fn new(config: PipelineConfig, mock: bool) -> Result<Pipeline, PipelineError> {
        let store = Arc::new(load_corpus(&config.corpus)?);
        let client = Arc::new(build_client(&config.run, mock)?);
        let engine = Engine::new(store, client, config.sections.clone());
        Ok(Pipeline { config, engine })
    }

    pub fn from_parts(config: PipelineConfig, engine: Engine) -> Pipeline {
        Pipeline { config, engine }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn answer(&self, question: &str) -> Result<PipelineAnswer, PipelineError> {
        let mut state = QueryState::new("query", question);
        for node in &self.config.nodes {
            state = self.engine.apply(node.kind, &node.spec.resolved, node.top_k, &state).map_err(node_err(node.kind))?.0;
        }
        if state.answer.is_none() {
            let llm = self.config.sections.llm.clone();
            state = self
                .engine
                .apply(NodeKind::Generator, &Module::Generator { llm }, 0, &state)
                .map_err(node_err(NodeKind::Generator))?
                .0;
        }
        let passage_ids: Vec<String> = state
            .list
            .as_ref()
            .map(|l| l.entries.iter().map(|e| e.passage_id.clone()).collect())
            .unwrap_or_default();
        Ok(PipelineAnswer {
            answer: state.answer.unwrap_or_default(),
            empty_context: passage_ids.is_empty(),
            passage_ids,
        })
    }
}
