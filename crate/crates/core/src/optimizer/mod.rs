//! Greedy node sweep: evaluate each node's candidates on every query, pick
//! a winner, and feed its outputs to the next node.

mod artifacts;
mod run;
mod select;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use artifacts::{node_dir_name, read_node_tables, NodeTable};
pub use run::{optimize, prepare, RunError, RunOptions};
pub use select::{select, Scored, SelectError, Selection, ELAPSED_RESOLUTION_SECONDS};

use crate::config::{normalize, Config, JudgeKind, Module, ModuleSpec, NodeConfig, NodeKind, PipelineConfig, PipelineNode};
use crate::corpus::{PassageStore, QaRecord};
use crate::llm::LlmClient;
use crate::metrics::{
    context_precision_at_k, g_eval, meteor, rouge, sem_score, GoldJudge, LlmJudge, Metric, RelevanceJudge,
    RelevanceJudgment,
};
use crate::pipeline::{pass_through, Engine, QueryState};
use crate::retrieval::{Bm25Params, RankedList};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("{0}")]
    Setup(String),
    #[error("node `{node}` failed: {reason}")]
    NodeFailed { node: NodeKind, reason: String },
    #[error("writing {path}: {message}")]
    Artifact { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub qid: String,
    pub values: BTreeMap<Metric, Option<f64>>,
    pub elapsed_seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One candidate's results on one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub node: NodeKind,
    pub label: String,
    pub module: String,
    pub params: serde_json::Value,
    pub queries: Vec<QueryRecord>,
    pub means: BTreeMap<Metric, f64>,
    /// Queries that ran but lacked a value for the metric.
    pub missing: BTreeMap<Metric, usize>,
    pub failed_queries: usize,
    pub mean_elapsed_seconds: f64,
    pub disqualified: bool,
    pub value: Option<f64>,
    pub excluded: Option<String>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeOutcome {
    pub node: NodeKind,
    pub top_k: usize,
    pub metrics: Vec<Metric>,
    pub fingerprint: String,
    pub input_checksum: String,
    pub output_checksum: String,
    pub records: Vec<EvaluationRecord>,
    pub winner: usize,
    #[serde(skip)]
    pub outputs: Vec<QueryState>,
}

impl NodeOutcome {
    pub fn winner_record(&self) -> &EvaluationRecord {
        &self.records[self.winner]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub label: String,
    pub means: BTreeMap<Metric, f64>,
    pub missing: BTreeMap<Metric, usize>,
    pub failed_queries: usize,
    pub value: Option<f64>,
    pub excluded: Option<String>,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: NodeKind,
    pub top_k: usize,
    pub metrics: Vec<Metric>,
    pub winner: String,
    pub module: String,
    pub params: serde_json::Value,
    pub selection_value: Option<f64>,
    pub input_checksum: String,
    pub output_checksum: String,
    pub candidates: Vec<CandidateSummary>,
}

/// Run results without wall-clock data, so identical runs serialize
/// identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub queries: usize,
    pub passages: usize,
    pub module_evaluations: usize,
    pub nodes: Vec<NodeSummary>,
    pub final_metrics: BTreeMap<Metric, f64>,
}

impl RunSummary {
    pub fn winners(&self) -> Vec<(NodeKind, String)> {
        self.nodes.iter().map(|n| (n.node, n.winner.clone())).collect()
    }
}

pub fn checksum(states: &[QueryState]) -> String {
    let bytes = serde_json::to_vec(states).expect("query states serialize");
    hex::encode(Sha256::digest(bytes))
}

pub struct Optimizer {
    config: Config,
    engine: Arc<Engine>,
    qa: Vec<QaRecord>,
    judge: Box<dyn RelevanceJudge>,
    judgments: Mutex<HashMap<(String, String), bool>>,
    evaluations: AtomicUsize,
    pool: rayon::ThreadPool,
    seed: Option<u64>,
    corpus_path: Option<PathBuf>,
}

impl Optimizer {
    pub fn new(
        config: Config,
        store: PassageStore,
        qa: Vec<QaRecord>,
        client: LlmClient,
        workers: Option<usize>,
        seed: Option<u64>,
    ) -> Result<Optimizer, OptimizeError> {
        if qa.is_empty() {
            return Err(OptimizeError::Setup("the QA set is empty".into()));
        }
        if config.evaluation.relevance_judge == JudgeKind::Gold {
            if let Some(q) = qa.iter().find(|q| q.gold_passage_ids.is_empty()) {
                return Err(OptimizeError::Setup(format!(
                    "query `{}` has no gold passage ids, which the gold relevance judge needs",
                    q.qid
                )));
            }
        }
        let client = Arc::new(client);
        let judge: Box<dyn RelevanceJudge> = match config.evaluation.relevance_judge {
            JudgeKind::Gold => Box::new(GoldJudge),
            JudgeKind::Llm => Box::new(LlmJudge::new(client.clone(), config.sections.judge.clone())),
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.unwrap_or(config.run.workers).max(1))
            .build()
            .map_err(|e| OptimizeError::Setup(e.to_string()))?;
        let engine = Arc::new(Engine::new(Arc::new(store), client, config.sections.clone()));
        let corpus_path = config.corpus.clone();
        Ok(Optimizer {
            config,
            engine,
            qa,
            judge,
            judgments: Mutex::new(HashMap::new()),
            evaluations: AtomicUsize::new(0),
            pool,
            seed,
            corpus_path,
        })
    }

    /// Corpus location written into the exported pipeline.
    pub fn with_corpus_path(mut self, path: PathBuf) -> Self {
        self.corpus_path = Some(path);
        self
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn engine(&self) -> &Arc<Engine> {
        &self.engine
    }

    /// Candidate evaluations performed so far (resumed nodes excluded).
    pub fn evaluations_performed(&self) -> usize {
        self.evaluations.load(Ordering::SeqCst)
    }

    pub fn initial_states(&self) -> Vec<QueryState> {
        self.qa.iter().map(|q| QueryState::new(&q.qid, &q.question)).collect()
    }

    fn judged(&self, qa: &QaRecord, passage_id: &str) -> Result<bool, String> {
        let key = (qa.qid.clone(), passage_id.to_string());
        if let Some(&v) = self.judgments.lock().unwrap().get(&key) {
            return Ok(v);
        }
        let passage = self
            .engine
            .store
            .get(passage_id)
            .ok_or_else(|| format!("passage `{passage_id}` not in store"))?;
        let v = self.judge.is_relevant(qa, passage).map_err(|e| e.to_string())?;
        self.judgments.lock().unwrap().insert(key, v);
        Ok(v)
    }

    fn context_precision(&self, list: &RankedList, qa: &QaRecord, k: usize) -> Result<f64, String> {
        let judgments = list
            .entries
            .iter()
            .take(k)
            .map(|e| {
                Ok(RelevanceJudgment {
                    qid: qa.qid.clone(),
                    passage_id: e.passage_id.clone(),
                    relevant: self.judged(qa, &e.passage_id)?,
                    judge: self.judge.name().to_string(),
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let mut list = list.clone();
        list.qid = qa.qid.clone();
        context_precision_at_k(&list, &judgments, k).map_err(|e| e.to_string())
    }

    fn generation_metrics(
        &self,
        metrics: &[Metric],
        answer: &str,
        qa: &QaRecord,
    ) -> Result<BTreeMap<Metric, Option<f64>>, String> {
        let mut out = BTreeMap::new();
        let ev = self.config.evaluation;
        let client = &self.engine.client;
        for &m in metrics {
            let v = match m {
                Metric::Rouge => Some(rouge(answer, &qa.ground_truth_answer, ev.rouge)),
                Metric::Meteor => Some(meteor(answer, &qa.ground_truth_answer)),
                Metric::SemScore => Some(
                    sem_score(answer, &qa.ground_truth_answer, client, &self.config.sections.embedding, ev.sem_score_mapping)
                        .map_err(|e| e.to_string())?,
                ),
                Metric::GEval => {
                    g_eval(&qa.question, answer, client, &self.config.sections.judge).map_err(|e| e.to_string())?
                }
                Metric::ContextPrecision => return Err("context precision needs a ranked list".into()),
            };
            out.insert(m, v);
        }
        Ok(out)
    }

    fn fixture(&self, node: &NodeConfig) -> Option<Module> {
        if let Some(f) = &node.strategy.fixture {
            return Some(f.resolved.clone());
        }
        match node.kind {
            NodeKind::QueryExpansion => Some(Module::Bm25(Bm25Params::default())),
            NodeKind::PromptMaker => Some(
                self.config
                    .node(NodeKind::Generator)
                    .and_then(|g| g.candidates.first())
                    .map(|c| c.resolved.clone())
                    .unwrap_or(Module::Generator {
                        llm: self.config.sections.llm.clone(),
                    }),
            ),
            _ => None,
        }
    }

    fn eval_query(
        &self,
        node: &NodeConfig,
        module: &Module,
        fixture: Option<&Module>,
        state: &QueryState,
        qa: &QaRecord,
    ) -> (Option<QueryState>, QueryRecord) {
        let run = || -> Result<(QueryState, MetricValues, f64), String> {
            let (out, mut secs) = self.engine.apply(node.kind, module, node.top_k, state)?;
            let scored = match fixture {
                Some(f) => {
                    let fixture_node = if node.kind == NodeKind::QueryExpansion {
                        NodeKind::Retrieval
                    } else {
                        NodeKind::Generator
                    };
                    let (s, fsecs) = self.engine.apply(fixture_node, f, node.top_k, &out)?;
                    secs += fsecs;
                    s
                }
                None => out.clone(),
            };
            let values = if node.kind.is_retrieval_side() {
                let list = scored.list.as_ref().ok_or("no ranked list to score")?;
                BTreeMap::from([(Metric::ContextPrecision, Some(self.context_precision(list, qa, node.top_k)?))])
            } else {
                let answer = scored.answer.as_deref().ok_or("no answer to score")?;
                self.generation_metrics(&node.strategy.metrics, answer, qa)?
            };
            Ok((out, values, secs))
        };
        let start = Instant::now();
        match run() {
            Ok((out, values, secs)) => (
                Some(out),
                QueryRecord {
                    qid: qa.qid.clone(),
                    values,
                    elapsed_seconds: secs,
                    error: None,
                },
            ),
            Err(e) => {
                log::warn!("{}: query `{}` failed: {e}", node.kind, qa.qid);
                (
                    None,
                    QueryRecord {
                        qid: qa.qid.clone(),
                        values: BTreeMap::new(),
                        elapsed_seconds: start.elapsed().as_secs_f64(),
                        error: Some(e),
                    },
                )
            }
        }
    }

    fn evaluate_candidate(
        &self,
        node: &NodeConfig,
        spec: &ModuleSpec,
        inputs: &[QueryState],
    ) -> (EvaluationRecord, Vec<Option<QueryState>>) {
        self.evaluations.fetch_add(1, Ordering::SeqCst);
        let fixture = self.fixture(node);
        let results: Vec<(Option<QueryState>, QueryRecord)> = self.pool.install(|| {
            inputs
                .par_iter()
                .zip(self.qa.par_iter())
                .map(|(state, qa)| self.eval_query(node, &spec.resolved, fixture.as_ref(), state, qa))
                .collect()
        });
        let (outputs, queries): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let failed = queries.iter().filter(|q| q.error.is_some()).count();
        let mut means = BTreeMap::new();
        let mut missing = BTreeMap::new();
        for m in &node.strategy.metrics {
            let ran: Vec<&QueryRecord> = queries.iter().filter(|q| q.error.is_none()).collect();
            let vals: Vec<f64> = ran.iter().filter_map(|q| q.values.get(m).copied().flatten()).collect();
            if vals.len() < ran.len() {
                missing.insert(*m, ran.len() - vals.len());
            }
            if !vals.is_empty() {
                means.insert(*m, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        let mean_elapsed = queries.iter().map(|q| q.elapsed_seconds).sum::<f64>() / queries.len().max(1) as f64;
        let disqualified = failed * 2 > queries.len();
        if disqualified {
            log::warn!("{}: `{}` failed {failed}/{} queries; disqualified", node.kind, spec.label(), queries.len());
        }
        let record = EvaluationRecord {
            node: node.kind,
            label: spec.label(),
            module: spec.module.clone(),
            params: spec.params_json(),
            queries,
            means,
            missing,
            failed_queries: failed,
            mean_elapsed_seconds: mean_elapsed,
            disqualified,
            value: None,
            excluded: None,
            selected: false,
        };
        (record, outputs)
    }

    fn fingerprint(&self, node: &NodeConfig, input_checksum: &str) -> String {
        let text = format!("{node:?}|{:?}|{:?}|{input_checksum}", self.config.evaluation, self.config.sections);
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Evaluates every candidate of `node` on `inputs` and selects a winner.
    pub fn evaluate_node(&self, node: &NodeConfig, inputs: &[QueryState]) -> Result<NodeOutcome, OptimizeError> {
        let input_checksum = checksum(inputs);
        let mut records = Vec::with_capacity(node.candidates.len());
        let mut outputs = Vec::with_capacity(node.candidates.len());
        for spec in &node.candidates {
            let (r, o) = self.evaluate_candidate(node, spec, inputs);
            records.push(r);
            outputs.push(o);
        }
        let scored: Vec<Scored> = records
            .iter()
            .map(|r| Scored {
                means: r.means.clone(),
                mean_elapsed_seconds: r.mean_elapsed_seconds,
                disqualified: r.disqualified,
            })
            .collect();
        let fingerprint = self.fingerprint(node, &input_checksum);
        let selection = match select(&scored, &node.strategy.metrics, node.strategy.speed_threshold_seconds, self.seed) {
            Ok(s) => s,
            Err(e) => {
                return Err(OptimizeError::NodeFailed {
                    node: node.kind,
                    reason: format!("{e}; {}", failure_digest(&records)),
                })
            }
        };
        for (i, r) in records.iter_mut().enumerate() {
            r.value = selection.values[i];
            r.excluded = selection.excluded[i].clone();
            r.selected = i == selection.winner;
        }
        let winner_outputs: Vec<QueryState> = outputs
            .swap_remove(selection.winner)
            .into_iter()
            .zip(inputs)
            .map(|(out, input)| {
                out.unwrap_or_else(|| {
                    log::warn!("{}: winner failed on query `{}`; passing its input through", node.kind, input.qid);
                    pass_through(node.kind, node.top_k, input, &self.engine.store)
                })
            })
            .collect();
        Ok(NodeOutcome {
            node: node.kind,
            top_k: node.top_k,
            metrics: node.strategy.metrics.clone(),
            fingerprint,
            input_checksum,
            output_checksum: checksum(&winner_outputs),
            records,
            winner: selection.winner,
            outputs: winner_outputs,
        })
    }

    /// Sweeps all nodes, writing artifacts under `out_dir` as each node
    /// completes. With `resume`, nodes whose stored results match the
    /// current config and inputs are loaded instead of re-run.
    pub fn run(&self, out_dir: &Path, resume: bool) -> Result<RunSummary, OptimizeError> {
        let started = Instant::now();
        artifacts::create_dir(out_dir)?;
        let mut states = self.initial_states();
        let mut outcomes: Vec<NodeOutcome> = Vec::new();
        for (idx, node) in self.config.nodes.iter().enumerate() {
            let dir = out_dir.join(node_dir_name(idx, node.kind));
            let fingerprint = self.fingerprint(node, &checksum(&states));
            let outcome = match resume.then(|| artifacts::load_node(&dir, &fingerprint)).flatten() {
                Some(done) => {
                    log::info!("{}: resumed from {}", node.kind, dir.display());
                    done
                }
                None => {
                    log::info!("{}: evaluating {} candidates", node.kind, node.candidates.len());
                    let result = self.evaluate_node(node, &states);
                    match result {
                        Ok(done) => {
                            artifacts::write_node(out_dir, idx, &done)?;
                            done
                        }
                        Err(e) => {
                            artifacts::write_failure(out_dir, idx, node.kind, &e.to_string())?;
                            return Err(e);
                        }
                    }
                }
            };
            states = outcome.outputs.clone();
            outcomes.push(outcome);
        }
        let summary = self.summarize(&outcomes);
        artifacts::write_json(&out_dir.join("summary.json"), &summary)?;
        artifacts::write_timing(out_dir, &outcomes, started.elapsed().as_secs_f64())?;
        let best = self.best_pipeline(&outcomes);
        artifacts::write_text(&out_dir.join("best_pipeline.toml"), &best.to_toml_string())?;
        Ok(summary)
    }

    fn summarize(&self, outcomes: &[NodeOutcome]) -> RunSummary {
        let nodes = outcomes
            .iter()
            .map(|o| {
                let w = o.winner_record();
                NodeSummary {
                    node: o.node,
                    top_k: o.top_k,
                    metrics: o.metrics.clone(),
                    winner: w.label.clone(),
                    module: w.module.clone(),
                    params: w.params.clone(),
                    selection_value: w.value,
                    input_checksum: o.input_checksum.clone(),
                    output_checksum: o.output_checksum.clone(),
                    candidates: o
                        .records
                        .iter()
                        .map(|r| CandidateSummary {
                            label: r.label.clone(),
                            means: r.means.clone(),
                            missing: r.missing.clone(),
                            failed_queries: r.failed_queries,
                            value: r.value,
                            excluded: r.excluded.clone(),
                            selected: r.selected,
                        })
                        .collect(),
                }
            })
            .collect();
        RunSummary {
            queries: self.qa.len(),
            passages: self.engine.store.len(),
            module_evaluations: outcomes.iter().map(|o| o.records.len()).sum(),
            nodes,
            final_metrics: outcomes.last().map(|o| o.winner_record().means.clone()).unwrap_or_default(),
        }
    }

    /// The winners as a loadable pipeline config.
    pub fn best_pipeline(&self, outcomes: &[NodeOutcome]) -> PipelineConfig {
        let corpus = self
            .corpus_path
            .as_ref()
            .map(|p| normalize(p.clone()))
            .unwrap_or_default();
        let nodes = outcomes
            .iter()
            .filter_map(|o| {
                let node = self.config.node(o.node)?;
                Some(PipelineNode {
                    kind: o.node,
                    top_k: o.top_k,
                    spec: node.candidates[o.winner].clone(),
                })
            })
            .collect();
        let mut run = self.config.run.clone();
        run.cache = run.cache.map(normalize);
        PipelineConfig {
            corpus,
            sections: self.config.sections.clone(),
            run,
            nodes,
        }
    }
}

type MetricValues = BTreeMap<Metric, Option<f64>>;

fn failure_digest(records: &[EvaluationRecord]) -> String {
    records
        .iter()
        .map(|r| {
            let first = r.queries.iter().find_map(|q| q.error.clone()).unwrap_or_default();
            if r.failed_queries > 0 {
                format!("{}: {}/{} failed ({first})", r.label, r.failed_queries, r.queries.len())
            } else {
                format!("{}: {}", r.label, r.excluded.clone().unwrap_or_else(|| "ok".into()))
            }
        })
        .collect::<Vec<_>>()
        .join("; ")
}
