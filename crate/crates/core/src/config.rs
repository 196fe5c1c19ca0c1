//! Optimization config: TOML parsing, schema validation and module
//! resolution.
//!
//! Validation walks the whole document and reports every problem with its
//! key path before anything runs.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

use crate::augment::NeighborMode;
use crate::llm::LlmConfig;
use crate::metrics::{Metric, RougeVariant, SemScoreMapping};
use crate::prompt::{PromptStyle, PromptTemplate};
use crate::rerank::ScorerKind;
use crate::retrieval::{Bm25Params, FusionMethod, Normalization};
use crate::template::Template;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    QueryExpansion,
    Retrieval,
    PassageAugmenter,
    PassageReranker,
    PromptMaker,
    Generator,
}

impl NodeKind {
    pub const ORDER: [NodeKind; 6] = [
        NodeKind::QueryExpansion,
        NodeKind::Retrieval,
        NodeKind::PassageAugmenter,
        NodeKind::PassageReranker,
        NodeKind::PromptMaker,
        NodeKind::Generator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::QueryExpansion => "query_expansion",
            NodeKind::Retrieval => "retrieval",
            NodeKind::PassageAugmenter => "passage_augmenter",
            NodeKind::PassageReranker => "passage_reranker",
            NodeKind::PromptMaker => "prompt_maker",
            NodeKind::Generator => "generator",
        }
    }

    pub fn parse(s: &str) -> Option<NodeKind> {
        NodeKind::ORDER.into_iter().find(|k| k.as_str() == s)
    }

    pub fn default_top_k(self) -> usize {
        match self {
            NodeKind::QueryExpansion | NodeKind::Retrieval => 10,
            NodeKind::PassageAugmenter => 15,
            NodeKind::PassageReranker | NodeKind::PromptMaker | NodeKind::Generator => 5,
        }
    }

    /// Nodes whose outputs are scored on ranked passages.
    pub fn is_retrieval_side(self) -> bool {
        !matches!(self, NodeKind::PromptMaker | NodeKind::Generator)
    }

    pub fn default_metrics(self) -> Vec<Metric> {
        if self.is_retrieval_side() {
            vec![Metric::ContextPrecision]
        } else {
            vec![Metric::Meteor, Metric::Rouge, Metric::SemScore, Metric::GEval]
        }
    }

    pub fn modules(self) -> &'static [&'static str] {
        match self {
            NodeKind::QueryExpansion => &["pass_query_expansion", "query_decompose", "hyde"],
            NodeKind::Retrieval => &["bm25", "vectordb", "hybrid_rrf", "hybrid_cc", "hybrid_dbsf"],
            NodeKind::PassageAugmenter => &["pass_passage_augmenter", "prev_next_augmenter"],
            NodeKind::PassageReranker => &[
                "pass_reranker",
                "tart",
                "monot5",
                "upr",
                "rankgpt",
                "colbert_reranker",
                "sentence_transformer_reranker",
                "flag_embedding_reranker",
                "flag_embedding_llm_reranker",
                "pointwise_reranker",
            ],
            NodeKind::PromptMaker => &["f_string", "long_context_reorder"],
            NodeKind::Generator => &["llm_generator", "llama_index_llm"],
        }
    }

    pub fn node_of_module(module: &str) -> Option<NodeKind> {
        NodeKind::ORDER.into_iter().find(|k| k.modules().contains(&module))
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A module with its parameters resolved to typed settings.
#[derive(Debug, Clone, PartialEq)]
pub enum Module {
    PassQueryExpansion,
    QueryDecompose { llm: LlmConfig, template: Option<Template> },
    Hyde { llm: LlmConfig, template: Option<Template> },
    Bm25(Bm25Params),
    VectorDb { embedding: LlmConfig },
    Hybrid { method: FusionMethod, embedding: LlmConfig },
    PassAugmenter,
    PrevNext { mode: NeighborMode, embedding: LlmConfig },
    PassReranker,
    Pointwise { name: String, scorer: ScorerKind, llm: LlmConfig, instruction: Option<String> },
    Listwise { llm: LlmConfig },
    Prompt { style: PromptStyle, template: PromptTemplate },
    Generator { llm: LlmConfig },
}

/// One candidate as declared, plus its resolved form.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleSpec {
    pub module: String,
    pub params: Table,
    pub resolved: Module,
}

impl ModuleSpec {
    /// `module` or `module(key=value, ...)` with keys sorted.
    pub fn label(&self) -> String {
        if self.params.is_empty() {
            return self.module.clone();
        }
        let parts: Vec<String> = self.params.iter().map(|(k, v)| format!("{k}={}", compact(v))).collect();
        format!("{}({})", self.module, parts.join(", "))
    }

    pub fn params_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.params).unwrap_or(serde_json::Value::Null)
    }
}

fn compact(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => format!("[{}]", a.iter().map(compact).collect::<Vec<_>>().join(", ")),
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub metrics: Vec<Metric>,
    pub speed_threshold_seconds: Option<f64>,
    pub fixture: Option<ModuleSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeConfig {
    pub kind: NodeKind,
    pub top_k: usize,
    pub strategy: Strategy,
    pub candidates: Vec<ModuleSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    #[default]
    Gold,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvaluationSettings {
    pub relevance_judge: JudgeKind,
    pub sem_score_mapping: SemScoreMapping,
    pub rouge: RougeVariant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub workers: usize,
    pub requests_per_second: Option<f64>,
    pub cache: Option<PathBuf>,
    pub retry_attempts: u32,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            workers: 4,
            requests_per_second: None,
            cache: None,
            retry_attempts: 3,
        }
    }
}

/// Model sections shared by modules that do not override them.
#[derive(Debug, Clone, PartialEq)]
pub struct Sections {
    pub llm: LlmConfig,
    pub embedding: LlmConfig,
    pub judge: LlmConfig,
}

impl Default for Sections {
    fn default() -> Self {
        Sections {
            llm: LlmConfig::new("gpt-3.5-turbo"),
            embedding: LlmConfig::new("text-embedding-ada-002"),
            judge: LlmConfig::new("gpt-4-turbo"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub corpus: Option<PathBuf>,
    pub qa: Option<PathBuf>,
    pub sections: Sections,
    pub evaluation: EvaluationSettings,
    pub run: RunSettings,
    pub nodes: Vec<NodeConfig>,
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Config, ConfigError> {
        let text = read(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Config::from_toml_str(&text, &base)
    }

    /// Relative paths resolve against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Config, ConfigError> {
        let doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut w = Walker::new(base_dir);
        let config = w.config(&doc);
        w.finish(config)
    }

    pub fn node(&self, kind: NodeKind) -> Option<&NodeConfig> {
        self.nodes.iter().find(|n| n.kind == kind)
    }

    /// Candidate labels per node, in sweep order.
    pub fn plan(&self) -> Vec<(NodeKind, Vec<String>)> {
        self.nodes
            .iter()
            .map(|n| (n.kind, n.candidates.iter().map(ModuleSpec::label).collect()))
            .collect()
    }

    /// Module evaluations a full sweep performs: the sum of candidate
    /// counts over nodes.
    pub fn evaluation_count(&self) -> usize {
        self.nodes.iter().map(|n| n.candidates.len()).sum()
    }
}

/// Absolute, with `.` and `..` resolved when the path exists.
pub fn normalize(path: PathBuf) -> PathBuf {
    std::fs::canonicalize(&path)
        .or_else(|_| std::path::absolute(&path))
        .unwrap_or(path)
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// The winning module per node, loadable without the optimization config.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub sections: Sections,
    pub run: RunSettings,
    pub nodes: Vec<PipelineNode>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineNode {
    pub kind: NodeKind,
    pub top_k: usize,
    pub spec: ModuleSpec,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<PipelineConfig, ConfigError> {
        let text = read(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        PipelineConfig::from_toml_str(&text, &base)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<PipelineConfig, ConfigError> {
        let doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut w = Walker::new(base_dir);
        let config = w.pipeline(&doc);
        w.finish(config)
    }

    pub fn to_toml_string(&self) -> String {
        let mut doc = Table::new();
        doc.insert("corpus".into(), Value::String(self.corpus.display().to_string()));
        for (name, cfg) in [
            ("llm", &self.sections.llm),
            ("embedding", &self.sections.embedding),
            ("judge", &self.sections.judge),
        ] {
            doc.insert(name.into(), llm_table(cfg));
        }
        let mut run = Table::new();
        run.insert("workers".into(), Value::Integer(self.run.workers as i64));
        if let Some(rps) = self.run.requests_per_second {
            run.insert("requests_per_second".into(), Value::Float(rps));
        }
        if let Some(cache) = &self.run.cache {
            run.insert("cache".into(), Value::String(cache.display().to_string()));
        }
        run.insert("retry_attempts".into(), Value::Integer(i64::from(self.run.retry_attempts)));
        doc.insert("run".into(), Value::Table(run));
        let nodes = self
            .nodes
            .iter()
            .map(|n| {
                let mut t = Table::new();
                t.insert("name".into(), Value::String(n.kind.as_str().into()));
                t.insert("top_k".into(), Value::Integer(n.top_k as i64));
                t.insert("module".into(), Value::String(n.spec.module.clone()));
                if !n.spec.params.is_empty() {
                    t.insert("params".into(), Value::Table(n.spec.params.clone()));
                }
                Value::Table(t)
            })
            .collect();
        doc.insert("nodes".into(), Value::Array(nodes));
        toml::to_string(&doc).expect("pipeline config serializes")
    }
}

fn llm_table(cfg: &LlmConfig) -> Value {
    match toml::Value::try_from(cfg) {
        Ok(v) => v,
        Err(_) => Value::Table(Table::new()),
    }
}

const LLM_KEYS: &[&str] = &["model_name", "temperature", "max_tokens", "endpoint_url", "api_key_env", "logprobs"];

#[derive(Debug, Clone, Copy, PartialEq)]
enum ParamType {
    Float,
    PositiveFloat,
    PositiveInt,
    Str,
    Bool,
    Weights,
    Mode,
    Scorer,
    Path,
}

impl ParamType {
    fn accepts(self, v: &Value) -> bool {
        match self {
            ParamType::Float => v.as_float().is_some() || v.as_integer().is_some(),
            ParamType::PositiveFloat => as_f64(v).is_some_and(|x| x > 0.0),
            ParamType::PositiveInt => v.as_integer().is_some_and(|i| i > 0),
            ParamType::Str | ParamType::Path => v.is_str(),
            ParamType::Bool => v.is_bool(),
            ParamType::Weights => v
                .as_array()
                .is_some_and(|a| a.len() == 2 && a.iter().all(|x| as_f64(x).is_some_and(|f| f >= 0.0)))
                && weights_of(v).is_some_and(|(l, s)| l + s > 0.0),
            ParamType::Mode => matches!(v.as_str(), Some("prev" | "next" | "both")),
            ParamType::Scorer => matches!(
                v.as_str(),
                Some("overlap" | "embedding_cosine" | "true_token" | "query_logprob" | "remote_listwise")
            ),
        }
    }

    fn describe(self) -> &'static str {
        match self {
            ParamType::Float => "a number",
            ParamType::PositiveFloat => "a positive number",
            ParamType::PositiveInt => "a positive integer",
            ParamType::Str => "a string",
            ParamType::Path => "a file path",
            ParamType::Bool => "a boolean",
            ParamType::Weights => "a pair of non-negative weights [lexical, semantic]",
            ParamType::Mode => "one of prev, next, both",
            ParamType::Scorer => {
                "one of overlap, embedding_cosine, true_token, query_logprob, remote_listwise"
            }
        }
    }

    /// An array given where a single value is expected lists alternatives.
    fn is_expansion(self, v: &Value) -> bool {
        match self {
            ParamType::Weights => v.as_array().is_some_and(|a| !a.is_empty() && a.iter().all(Value::is_array)),
            _ => v.is_array(),
        }
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

fn weights_of(v: &Value) -> Option<(f64, f64)> {
    let a = v.as_array()?;
    Some((as_f64(a.first()?)?, as_f64(a.get(1)?)?))
}

fn llm_param(key: &str) -> ParamType {
    match key {
        "temperature" => ParamType::Float,
        "max_tokens" => ParamType::PositiveInt,
        "logprobs" => ParamType::Bool,
        _ => ParamType::Str,
    }
}

/// Parameter schema of a module, or `None` for an unknown module.
fn schema(module: &str) -> Option<Vec<(&'static str, ParamType)>> {
    let llm = || LLM_KEYS.iter().map(|k| (*k, llm_param(k))).collect::<Vec<_>>();
    let with = |mut base: Vec<(&'static str, ParamType)>, extra: &[(&'static str, ParamType)]| {
        base.extend_from_slice(extra);
        base
    };
    Some(match module {
        "pass_query_expansion" | "pass_passage_augmenter" | "pass_reranker" => vec![],
        "query_decompose" | "hyde" => with(llm(), &[("prompt", ParamType::Path)]),
        "bm25" => vec![("k1", ParamType::Float), ("b", ParamType::Float)],
        "vectordb" => llm(),
        "hybrid_rrf" => with(llm(), &[("rrf_k", ParamType::PositiveFloat)]),
        "hybrid_cc" | "hybrid_dbsf" => with(llm(), &[("weights", ParamType::Weights)]),
        "prev_next_augmenter" => with(llm(), &[("mode", ParamType::Mode)]),
        "tart"
        | "monot5"
        | "upr"
        | "rankgpt"
        | "colbert_reranker"
        | "sentence_transformer_reranker"
        | "flag_embedding_reranker"
        | "flag_embedding_llm_reranker"
        | "pointwise_reranker" => with(llm(), &[("scorer", ParamType::Scorer), ("instruction", ParamType::Str)]),
        "f_string" | "long_context_reorder" => vec![("prompt", ParamType::Path)],
        "llm_generator" | "llama_index_llm" => llm(),
        _ => return None,
    })
}

fn default_scorer(module: &str) -> ScorerKind {
    match module {
        "upr" => ScorerKind::QueryLogprob,
        "rankgpt" => ScorerKind::RemoteListwise,
        "colbert_reranker" => ScorerKind::EmbeddingCosine,
        "pointwise_reranker" => ScorerKind::Overlap,
        _ => ScorerKind::TrueToken,
    }
}

fn scorer_of(s: &str) -> ScorerKind {
    match s {
        "overlap" => ScorerKind::Overlap,
        "embedding_cosine" => ScorerKind::EmbeddingCosine,
        "true_token" => ScorerKind::TrueToken,
        "query_logprob" => ScorerKind::QueryLogprob,
        _ => ScorerKind::RemoteListwise,
    }
}

struct Walker {
    base: PathBuf,
    errors: Vec<String>,
}

impl Walker {
    fn new(base: &Path) -> Self {
        Walker {
            base: base.to_path_buf(),
            errors: Vec::new(),
        }
    }

    fn finish<T>(self, value: T) -> Result<T, ConfigError> {
        if self.errors.is_empty() {
            Ok(value)
        } else {
            Err(ConfigError::Invalid(self.errors))
        }
    }

    fn err(&mut self, path: &str, message: impl fmt::Display) {
        self.errors.push(format!("{path}: {message}"));
    }

    fn keys(&mut self, path: &str, table: &Table, allowed: &[&str]) {
        for k in table.keys() {
            if !allowed.contains(&k.as_str()) {
                self.err(&join(path, k), "unknown key");
            }
        }
    }

    fn table<'a>(&mut self, path: &str, doc: &'a Table, key: &str) -> Option<&'a Table> {
        match doc.get(key) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.err(&join(path, key), "expected a table");
                None
            }
        }
    }

    fn typed(&mut self, path: &str, t: &Table, key: &str, ty: ParamType) -> Option<Value> {
        let v = t.get(key)?;
        if ty.accepts(v) {
            Some(v.clone())
        } else {
            self.err(&join(path, key), format!("expected {}", ty.describe()));
            None
        }
    }

    fn string(&mut self, path: &str, t: &Table, key: &str) -> Option<String> {
        self.typed(path, t, key, ParamType::Str).and_then(|v| v.as_str().map(str::to_string))
    }

    fn path(&mut self, path: &str, t: &Table, key: &str) -> Option<PathBuf> {
        let raw = self.string(path, t, key)?;
        let joined = self.base.join(raw);
        Some(normalize(joined))
    }

    fn llm_overrides(&mut self, path: &str, t: &Table, base: &LlmConfig) -> LlmConfig {
        let mut cfg = base.clone();
        if let Some(v) = self.string(path, t, "model_name") {
            cfg.model_name = v;
        }
        if let Some(v) = self.typed(path, t, "temperature", ParamType::Float) {
            cfg.temperature = as_f64(&v).unwrap_or(0.0);
        }
        if let Some(v) = self.typed(path, t, "max_tokens", ParamType::PositiveInt) {
            cfg.max_tokens = v.as_integer().map(|i| i as u32);
        }
        if let Some(v) = self.string(path, t, "endpoint_url") {
            cfg.endpoint_url = v;
        }
        if let Some(v) = self.string(path, t, "api_key_env") {
            cfg.api_key_env = v;
        }
        if let Some(v) = self.typed(path, t, "logprobs", ParamType::Bool) {
            cfg.logprobs = v.as_bool().unwrap_or(false);
        }
        if let Err(e) = cfg.validate() {
            self.err(path, e);
        }
        cfg
    }

    fn section(&mut self, doc: &Table, key: &str, base: LlmConfig) -> LlmConfig {
        match self.table("", doc, key) {
            Some(t) => {
                self.keys(key, t, LLM_KEYS);
                self.llm_overrides(key, t, &base)
            }
            None => base,
        }
    }

    fn sections(&mut self, doc: &Table) -> Sections {
        let d = Sections::default();
        Sections {
            llm: self.section(doc, "llm", d.llm),
            embedding: self.section(doc, "embedding", d.embedding),
            judge: self.section(doc, "judge", d.judge),
        }
    }

    fn run(&mut self, doc: &Table) -> RunSettings {
        let mut run = RunSettings::default();
        let Some(t) = self.table("", doc, "run") else {
            return run;
        };
        self.keys("run", t, &["workers", "requests_per_second", "cache", "retry_attempts"]);
        if let Some(v) = self.typed("run", t, "workers", ParamType::PositiveInt) {
            run.workers = v.as_integer().unwrap_or(1) as usize;
        }
        if let Some(v) = self.typed("run", t, "requests_per_second", ParamType::PositiveFloat) {
            run.requests_per_second = as_f64(&v);
        }
        run.cache = self.path("run", t, "cache");
        if let Some(v) = self.typed("run", t, "retry_attempts", ParamType::PositiveInt) {
            run.retry_attempts = v.as_integer().unwrap_or(1) as u32;
        }
        run
    }

    fn evaluation(&mut self, doc: &Table) -> EvaluationSettings {
        let mut ev = EvaluationSettings::default();
        let Some(t) = self.table("", doc, "evaluation") else {
            return ev;
        };
        self.keys("evaluation", t, &["relevance_judge", "sem_score_mapping", "rouge"]);
        match self.string("evaluation", t, "relevance_judge").as_deref() {
            None | Some("gold") => {}
            Some("llm") => ev.relevance_judge = JudgeKind::Llm,
            Some(other) => self.err("evaluation.relevance_judge", format!("expected gold or llm, got `{other}`")),
        }
        match self.string("evaluation", t, "sem_score_mapping").as_deref() {
            None | Some("raw") => {}
            Some("shifted") => ev.sem_score_mapping = SemScoreMapping::Shifted,
            Some(other) => self.err("evaluation.sem_score_mapping", format!("expected raw or shifted, got `{other}`")),
        }
        match self.string("evaluation", t, "rouge").as_deref() {
            None | Some("rouge_l") => {}
            Some("rouge1") => ev.rouge = RougeVariant::One,
            Some("rouge2") => ev.rouge = RougeVariant::Two,
            Some(other) => self.err("evaluation.rouge", format!("expected rouge_l, rouge1 or rouge2, got `{other}`")),
        }
        ev
    }

    fn config(&mut self, doc: &Table) -> Config {
        self.keys("", doc, &["data", "llm", "embedding", "judge", "evaluation", "run", "nodes"]);
        let (mut corpus, mut qa) = (None, None);
        if let Some(t) = self.table("", doc, "data") {
            self.keys("data", t, &["corpus", "qa"]);
            corpus = self.path("data", t, "corpus");
            qa = self.path("data", t, "qa");
        }
        let sections = self.sections(doc);
        let evaluation = self.evaluation(doc);
        let run = self.run(doc);
        let mut nodes = Vec::new();
        match doc.get("nodes") {
            Some(Value::Array(items)) => {
                for (i, item) in items.iter().enumerate() {
                    let path = format!("nodes[{i}]");
                    match item.as_table() {
                        Some(t) => {
                            if let Some(n) = self.node(&path, t, &sections) {
                                nodes.push(n);
                            }
                        }
                        None => self.err(&path, "expected a table"),
                    }
                }
            }
            Some(_) => self.err("nodes", "expected an array of tables"),
            None => self.err("nodes", "at least one node is required"),
        }
        self.node_order(&nodes);
        Config {
            corpus,
            qa,
            sections,
            evaluation,
            run,
            nodes,
        }
    }

    fn node_order(&mut self, nodes: &[NodeConfig]) {
        let mut last: Option<NodeKind> = None;
        for n in nodes {
            if let Some(prev) = last {
                if n.kind <= prev {
                    self.err(
                        "nodes",
                        format!("`{}` listed after `{prev}`; nodes run in the order {}", n.kind, order_text()),
                    );
                }
            }
            last = Some(n.kind);
        }
        if !nodes.is_empty() && !nodes.iter().any(|n| n.kind == NodeKind::Retrieval) {
            self.err("nodes", "a retrieval node is required");
        }
    }

    fn node(&mut self, path: &str, t: &Table, sections: &Sections) -> Option<NodeConfig> {
        self.keys(path, t, &["name", "top_k", "strategy", "modules"]);
        let name = self.string(path, t, "name");
        let kind = match name.as_deref() {
            Some(n) => match NodeKind::parse(n) {
                Some(k) => k,
                None => {
                    self.err(&join(path, "name"), format!("unknown node `{n}`; expected one of {}", order_text()));
                    return None;
                }
            },
            None => {
                self.err(&join(path, "name"), "missing");
                return None;
            }
        };
        let top_k = self
            .typed(path, t, "top_k", ParamType::PositiveInt)
            .and_then(|v| v.as_integer())
            .map_or(kind.default_top_k(), |i| i as usize);
        let strategy = self.strategy(&join(path, "strategy"), t.get("strategy"), kind, sections);
        let mut candidates = Vec::new();
        match t.get("modules") {
            Some(Value::Array(items)) if !items.is_empty() => {
                for (i, item) in items.iter().enumerate() {
                    let mpath = format!("{path}.modules[{i}]");
                    match item.as_table() {
                        Some(m) => candidates.extend(self.candidates(&mpath, m, kind, sections)),
                        None => self.err(&mpath, "expected a table"),
                    }
                }
            }
            _ => self.err(&join(path, "modules"), "expected a non-empty array of module tables"),
        }
        Some(NodeConfig {
            kind,
            top_k,
            strategy,
            candidates,
        })
    }

    fn strategy(&mut self, path: &str, v: Option<&Value>, kind: NodeKind, sections: &Sections) -> Strategy {
        let mut s = Strategy {
            metrics: kind.default_metrics(),
            speed_threshold_seconds: None,
            fixture: None,
        };
        let Some(v) = v else {
            return s;
        };
        let Some(t) = v.as_table() else {
            self.err(path, "expected a table");
            return s;
        };
        self.keys(path, t, &["metrics", "speed_threshold_seconds", "fixture"]);
        if let Some(m) = t.get("metrics") {
            match m.as_array() {
                Some(arr) if !arr.is_empty() => {
                    let mut metrics = Vec::new();
                    for (i, x) in arr.iter().enumerate() {
                        let mp = format!("{path}.metrics[{i}]");
                        match x.as_str().map(str::parse::<Metric>) {
                            Some(Ok(metric)) if metric.is_retrieval() == kind.is_retrieval_side() => {
                                metrics.push(metric)
                            }
                            Some(Ok(metric)) => self.err(&mp, format!("metric `{metric}` does not apply to node `{kind}`")),
                            _ => self.err(&mp, format!("unknown metric {x}")),
                        }
                    }
                    s.metrics = metrics;
                }
                _ => self.err(&join(path, "metrics"), "expected a non-empty array of metric names"),
            }
        }
        if let Some(v) = self.typed(path, t, "speed_threshold_seconds", ParamType::PositiveFloat) {
            s.speed_threshold_seconds = as_f64(&v);
        }
        if let Some(f) = t.get("fixture") {
            let fpath = join(path, "fixture");
            let target = match kind {
                NodeKind::QueryExpansion => Some(NodeKind::Retrieval),
                NodeKind::PromptMaker => Some(NodeKind::Generator),
                _ => None,
            };
            match (f.as_table(), target) {
                (_, None) => self.err(&fpath, format!("node `{kind}` is evaluated directly and takes no fixture")),
                (None, _) => self.err(&fpath, "expected a module table"),
                (Some(ft), Some(target)) => {
                    let mut c = self.candidates(&fpath, ft, target, sections);
                    if c.len() > 1 {
                        self.err(&fpath, "a fixture must be a single module, not a list of alternatives");
                    }
                    s.fixture = c.pop();
                }
            }
        }
        s
    }

    /// One module table, expanded into one candidate per alternative value.
    fn candidates(&mut self, path: &str, t: &Table, kind: NodeKind, sections: &Sections) -> Vec<ModuleSpec> {
        let Some(module) = self.string(path, t, "module") else {
            self.err(&join(path, "module"), "missing");
            return Vec::new();
        };
        let Some(schema) = schema(&module) else {
            self.err(&join(path, "module"), format!("unknown module `{module}`"));
            return Vec::new();
        };
        if !kind.modules().contains(&module.as_str()) {
            self.err(&join(path, "module"), format!("module `{module}` does not belong to node `{kind}`"));
            return Vec::new();
        }
        let mut variants: Vec<Table> = vec![Table::new()];
        let mut ok = true;
        for (key, value) in t {
            if key == "module" {
                continue;
            }
            let Some(&(_, ty)) = schema.iter().find(|(k, _)| k == key) else {
                self.err(&join(path, key), format!("unknown parameter for `{module}`"));
                ok = false;
                continue;
            };
            let value = &match (ty, value.as_str()) {
                (ParamType::Path, Some(p)) => {
                    let joined = self.base.join(p);
                    Value::String(normalize(joined).display().to_string())
                }
                _ => value.clone(),
            };
            let options: Vec<Value> = if ty.is_expansion(value) {
                value.as_array().cloned().unwrap_or_default()
            } else {
                vec![value.clone()]
            };
            if options.is_empty() {
                self.err(&join(path, key), "empty list of alternatives");
                ok = false;
            }
            for (i, opt) in options.iter().enumerate() {
                if !ty.accepts(opt) {
                    let p = if options.len() > 1 { format!("{}[{i}]", join(path, key)) } else { join(path, key) };
                    self.err(&p, format!("expected {}", ty.describe()));
                    ok = false;
                }
            }
            variants = variants
                .into_iter()
                .flat_map(|v| {
                    options.iter().map(move |opt| {
                        let mut v = v.clone();
                        v.insert(key.clone(), opt.clone());
                        v
                    })
                })
                .collect();
        }
        if !ok {
            return Vec::new();
        }
        variants
            .into_iter()
            .filter_map(|params| {
                self.resolve(path, &module, &params, sections).map(|resolved| ModuleSpec {
                    module: module.clone(),
                    params,
                    resolved,
                })
            })
            .collect()
    }

    fn template(&mut self, path: &str, p: &Table, required: &[&str]) -> Option<Template> {
        let file = self.path(path, p, "prompt")?;
        match Template::from_file(&file, required) {
            Ok(t) => Some(t),
            Err(e) => {
                self.err(&join(path, "prompt"), e);
                None
            }
        }
    }

    fn resolve(&mut self, path: &str, module: &str, p: &Table, s: &Sections) -> Option<Module> {
        let before = self.errors.len();
        let resolved = match module {
            "pass_query_expansion" => Module::PassQueryExpansion,
            "query_decompose" => Module::QueryDecompose {
                llm: self.llm_overrides(path, p, &s.llm),
                template: self.template(path, p, &["query"]),
            },
            "hyde" => Module::Hyde {
                llm: self.llm_overrides(path, p, &s.llm),
                template: self.template(path, p, &["query"]),
            },
            "bm25" => {
                let d = Bm25Params::default();
                let k1 = p.get("k1").and_then(as_f64).unwrap_or(d.k1);
                let b = p.get("b").and_then(as_f64).unwrap_or(d.b);
                if !(k1 >= 0.0 && (0.0..=1.0).contains(&b)) {
                    self.err(path, format!("bm25 needs k1 >= 0 and 0 <= b <= 1, got k1={k1} b={b}"));
                }
                Module::Bm25(Bm25Params { k1, b })
            }
            "vectordb" => Module::VectorDb {
                embedding: self.llm_overrides(path, p, &s.embedding),
            },
            "hybrid_rrf" => Module::Hybrid {
                method: FusionMethod::Rrf {
                    eta: p.get("rrf_k").and_then(as_f64).unwrap_or(60.0),
                },
                embedding: self.llm_overrides(path, p, &s.embedding),
            },
            "hybrid_cc" | "hybrid_dbsf" => {
                let (l, sem) = p.get("weights").and_then(weights_of).unwrap_or((0.7, 0.3));
                Module::Hybrid {
                    method: FusionMethod::Convex {
                        alpha: l / (l + sem),
                        normalization: if module == "hybrid_cc" {
                            Normalization::MinMax
                        } else {
                            Normalization::ThreeSigma
                        },
                    },
                    embedding: self.llm_overrides(path, p, &s.embedding),
                }
            }
            "pass_passage_augmenter" => Module::PassAugmenter,
            "prev_next_augmenter" => Module::PrevNext {
                mode: match p.get("mode").and_then(Value::as_str) {
                    Some("prev") => NeighborMode::Prev,
                    Some("next") => NeighborMode::Next,
                    _ => NeighborMode::Both,
                },
                embedding: self.llm_overrides(path, p, &s.embedding),
            },
            "pass_reranker" => Module::PassReranker,
            "f_string" | "long_context_reorder" => {
                let template = match self.path(path, p, "prompt") {
                    Some(file) => match PromptTemplate::from_file(&file) {
                        Ok(t) => t,
                        Err(e) => {
                            self.err(&join(path, "prompt"), e);
                            PromptTemplate::default()
                        }
                    },
                    None => PromptTemplate::default(),
                };
                Module::Prompt {
                    style: if module == "f_string" {
                        PromptStyle::FString
                    } else {
                        PromptStyle::LongContextReorder
                    },
                    template,
                }
            }
            "llm_generator" | "llama_index_llm" => Module::Generator {
                llm: self.llm_overrides(path, p, &s.llm),
            },
            reranker => {
                let scorer = p
                    .get("scorer")
                    .and_then(Value::as_str)
                    .map_or(default_scorer(reranker), scorer_of);
                let base = if scorer == ScorerKind::EmbeddingCosine { &s.embedding } else { &s.llm };
                let mut llm = self.llm_overrides(path, p, base);
                if matches!(scorer, ScorerKind::TrueToken | ScorerKind::QueryLogprob) && !p.contains_key("logprobs") {
                    llm.logprobs = true;
                }
                if scorer == ScorerKind::RemoteListwise {
                    Module::Listwise { llm }
                } else {
                    Module::Pointwise {
                        name: reranker.to_string(),
                        scorer,
                        llm,
                        instruction: p.get("instruction").and_then(Value::as_str).map(str::to_string),
                    }
                }
            }
        };
        (self.errors.len() == before).then_some(resolved)
    }

    fn pipeline(&mut self, doc: &Table) -> PipelineConfig {
        self.keys("", doc, &["corpus", "llm", "embedding", "judge", "run", "nodes"]);
        let corpus = self.path("", doc, "corpus").unwrap_or_else(|| {
            self.err("corpus", "missing");
            PathBuf::new()
        });
        let sections = self.sections(doc);
        let run = self.run(doc);
        let mut nodes = Vec::new();
        let items = doc.get("nodes").and_then(Value::as_array).cloned().unwrap_or_default();
        if items.is_empty() {
            self.err("nodes", "expected a non-empty array of node tables");
        }
        for (i, item) in items.iter().enumerate() {
            let path = format!("nodes[{i}]");
            let Some(t) = item.as_table() else {
                self.err(&path, "expected a table");
                continue;
            };
            self.keys(&path, t, &["name", "top_k", "module", "params"]);
            let Some(kind) = self.string(&path, t, "name").and_then(|n| NodeKind::parse(&n)) else {
                self.err(&join(&path, "name"), "missing or unknown node name");
                continue;
            };
            let top_k = t.get("top_k").and_then(Value::as_integer).map_or(kind.default_top_k(), |k| k as usize);
            let mut module_table = t.get("params").and_then(Value::as_table).cloned().unwrap_or_default();
            if let Some(m) = t.get("module") {
                module_table.insert("module".into(), m.clone());
            }
            let mut specs = self.candidates(&path, &module_table, kind, &sections);
            if specs.len() != 1 {
                self.err(&path, "a pipeline node needs exactly one module");
                continue;
            }
            nodes.push(PipelineNode {
                kind,
                top_k,
                spec: specs.remove(0),
            });
        }
        let kinds: Vec<NodeKind> = nodes.iter().map(|n| n.kind).collect();
        if kinds.windows(2).any(|w| w[1] <= w[0]) {
            self.err("nodes", format!("nodes must follow the order {}", order_text()));
        }
        if !kinds.contains(&NodeKind::Retrieval) {
            self.err("nodes", "a retrieval node is required");
        }
        PipelineConfig {
            corpus,
            sections,
            run,
            nodes,
        }
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn order_text() -> String {
    NodeKind::ORDER.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Config, ConfigError> {
        Config::from_toml_str(text, Path::new("."))
    }

    fn errors(text: &str) -> Vec<String> {
        match parse(text) {
            Err(ConfigError::Invalid(e)) => e,
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    const MINIMAL: &str = r#"
[[nodes]]
name = "retrieval"
[[nodes.modules]]
module = "bm25"
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(MINIMAL).unwrap();
        assert_eq!(c.nodes[0].top_k, 10);
        assert_eq!(c.nodes[0].strategy.metrics, vec![Metric::ContextPrecision]);
        assert_eq!(c.nodes[0].candidates[0].resolved, Module::Bm25(Bm25Params::default()));
        assert_eq!(c.run.workers, 4);
    }

    #[test]
    fn every_unknown_key_is_reported_with_its_path() {
        let e = errors(
            r#"
colour = 1
[run]
speed = 2
[[nodes]]
name = "retrieval"
[[nodes.modules]]
module = "bm25"
k3 = 1.0
"#,
        );
        assert!(e.iter().any(|m| m.starts_with("colour: unknown key")), "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("run.speed: unknown key")), "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("nodes[0].modules[0].k3")), "{e:?}");
    }

    #[test]
    fn unknown_node_name_is_named() {
        let e = errors(
            r#"
[[nodes]]
name = "retreival"
[[nodes.modules]]
module = "bm25"
"#,
        );
        assert!(e.iter().any(|m| m.contains("unknown node `retreival`")), "{e:?}");
    }

    #[test]
    fn array_parameters_expand_into_candidates() {
        let c = parse(
            r#"
[[nodes]]
name = "retrieval"
[[nodes.modules]]
module = "hybrid_rrf"
rrf_k = [3, 5, 10]
[[nodes.modules]]
module = "hybrid_cc"
weights = [0.7, 0.3]
[[nodes.modules]]
module = "hybrid_dbsf"
weights = [[0.7, 0.3], [0.5, 0.5]]
"#,
        )
        .unwrap();
        let labels = &c.plan()[0].1;
        assert_eq!(
            labels,
            &[
                "hybrid_rrf(rrf_k=3)",
                "hybrid_rrf(rrf_k=5)",
                "hybrid_rrf(rrf_k=10)",
                "hybrid_cc(weights=[0.7, 0.3])",
                "hybrid_dbsf(weights=[0.7, 0.3])",
                "hybrid_dbsf(weights=[0.5, 0.5])",
            ]
        );
        match &c.nodes[0].candidates[3].resolved {
            Module::Hybrid { method: FusionMethod::Convex { alpha, .. }, .. } => assert!((alpha - 0.7).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn module_must_fit_its_node() {
        let e = errors(
            r#"
[[nodes]]
name = "retrieval"
[[nodes.modules]]
module = "hyde"
"#,
        );
        assert!(e.iter().any(|m| m.contains("does not belong to node `retrieval`")), "{e:?}");
    }

    #[test]
    fn nodes_must_be_in_order_and_include_retrieval() {
        let e = errors(
            r#"
[[nodes]]
name = "passage_reranker"
[[nodes.modules]]
module = "pass_reranker"
[[nodes]]
name = "passage_augmenter"
[[nodes.modules]]
module = "pass_passage_augmenter"
"#,
        );
        assert!(e.iter().any(|m| m.contains("listed after")), "{e:?}");
        assert!(e.iter().any(|m| m.contains("retrieval node is required")), "{e:?}");
    }

    #[test]
    fn metrics_must_match_node_type() {
        let e = errors(
            r#"
[[nodes]]
name = "retrieval"
strategy = { metrics = ["rouge"] }
[[nodes.modules]]
module = "bm25"
"#,
        );
        assert!(e.iter().any(|m| m.contains("does not apply")), "{e:?}");
    }

    #[test]
    fn named_rerankers_map_to_scorers() {
        let c = parse(
            r#"
[[nodes]]
name = "retrieval"
[[nodes.modules]]
module = "bm25"
[[nodes]]
name = "passage_reranker"
[[nodes.modules]]
module = "monot5"
[[nodes.modules]]
module = "rankgpt"
[[nodes.modules]]
module = "colbert_reranker"
[[nodes.modules]]
module = "upr"
"#,
        )
        .unwrap();
        let r = &c.nodes[1].candidates;
        assert!(matches!(&r[0].resolved, Module::Pointwise { scorer: ScorerKind::TrueToken, llm, .. } if llm.logprobs));
        assert!(matches!(&r[1].resolved, Module::Listwise { .. }));
        assert!(matches!(&r[2].resolved, Module::Pointwise { scorer: ScorerKind::EmbeddingCosine, .. }));
        assert!(matches!(&r[3].resolved, Module::Pointwise { scorer: ScorerKind::QueryLogprob, .. }));
    }

    #[test]
    fn fixture_only_on_paired_nodes() {
        let e = errors(
            r#"
[[nodes]]
name = "retrieval"
strategy = { fixture = { module = "bm25" } }
[[nodes.modules]]
module = "bm25"
"#,
        );
        assert!(e.iter().any(|m| m.contains("takes no fixture")), "{e:?}");
    }

    #[test]
    fn pipeline_round_trips() {
        let p = PipelineConfig {
            corpus: PathBuf::from("/data/corpus.jsonl"),
            sections: Sections::default(),
            run: RunSettings::default(),
            nodes: vec![PipelineNode {
                kind: NodeKind::Retrieval,
                top_k: 10,
                spec: {
                    let c = parse(
                        "[[nodes]]\nname = \"retrieval\"\n[[nodes.modules]]\nmodule = \"hybrid_dbsf\"\nweights = [0.7, 0.3]\n",
                    )
                    .unwrap();
                    c.nodes[0].candidates[0].clone()
                },
            }],
        };
        let text = p.to_toml_string();
        let back = PipelineConfig::from_toml_str(&text, Path::new("/")).unwrap();
        assert_eq!(back, p);
    }
}
