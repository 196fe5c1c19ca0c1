//! Python bindings for ragsweep.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ragsweep::config::Config;
use ragsweep::corpus::{self, ChunkConfig, PassageStore, WhitespaceTokenizer};
use ragsweep::metrics::{self, Metric};
use ragsweep::optimizer::{self, RunOptions, Scored};
use ragsweep::pipeline;
use ragsweep::retrieval::{self, Bm25Params, Normalization, RankedList};

fn runtime(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn metric(name: &str) -> PyResult<Metric> {
    name.parse().map_err(value)
}

fn ranked(entries: Vec<(String, f64)>) -> RankedList {
    let n = entries.len();
    RankedList::from_scores("q", "python", entries, n)
}

fn pairs(list: &RankedList) -> Vec<(String, f64)> {
    list.entries.iter().map(|e| (e.passage_id.clone(), e.score)).collect()
}

/// A passage store loaded from corpus JSONL.
#[pyclass(frozen)]
struct Corpus {
    store: PassageStore,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Corpus> {
        Ok(Corpus {
            store: corpus::load_corpus(path).map_err(value)?,
        })
    }

    /// Chunks the .txt/.md documents under `input` on whitespace tokens.
    #[staticmethod]
    #[pyo3(signature = (input, chunk_size = 512, overlap = 50))]
    fn ingest(input: PathBuf, chunk_size: usize, overlap: usize) -> PyResult<Corpus> {
        let cfg = ChunkConfig { chunk_size, overlap };
        let out = corpus::ingest(&input, &cfg, &WhitespaceTokenizer).map_err(value)?;
        if let Some(e) = out.errors.first() {
            return Err(value(e));
        }
        Ok(Corpus { store: out.store })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.store.save_jsonl(path).map_err(runtime)
    }

    fn __len__(&self) -> usize {
        self.store.len()
    }

    fn ids(&self) -> Vec<String> {
        self.store.ids().map(String::from).collect()
    }

    /// The passage as a dict.
    fn get<'py>(&self, py: Python<'py>, passage_id: &str) -> PyResult<Bound<'py, PyAny>> {
        let p = self.store.get(passage_id).ok_or_else(|| PyKeyError::new_err(passage_id.to_string()))?;
        to_py(py, p)
    }
}

#[pyclass(frozen)]
struct Bm25 {
    index: retrieval::Bm25Index,
}

#[pymethods]
impl Bm25 {
    #[new]
    #[pyo3(signature = (corpus, k1 = 1.5, b = 0.75))]
    fn new(corpus: &Corpus, k1: f64, b: f64) -> PyResult<Bm25> {
        Ok(Bm25 {
            index: retrieval::Bm25Index::build(&corpus.store, Bm25Params { k1, b }).map_err(value)?,
        })
    }

    /// `[(passage_id, score)]`, best first.
    #[pyo3(signature = (query, top_k = 10))]
    fn search(&self, query: &str, top_k: usize) -> Vec<(String, f64)> {
        pairs(&self.index.search("q", query, top_k))
    }
}

/// Reciprocal rank fusion of two `[(passage_id, score)]` lists.
#[pyfunction]
#[pyo3(signature = (lexical, semantic, eta = 60.0, top_k = 10))]
fn fuse_rrf(lexical: Vec<(String, f64)>, semantic: Vec<(String, f64)>, eta: f64, top_k: usize) -> PyResult<Vec<(String, f64)>> {
    let cfg = retrieval::RrfConfig { eta, top_k };
    Ok(pairs(&retrieval::fuse_rrf(&ranked(lexical), &ranked(semantic), &cfg).map_err(value)?))
}

/// Convex fusion; `normalization` is "minmax" or "three_sigma".
#[pyfunction]
#[pyo3(signature = (lexical, semantic, alpha = 0.7, normalization = "minmax", top_k = 10))]
fn fuse_convex(
    lexical: Vec<(String, f64)>,
    semantic: Vec<(String, f64)>,
    alpha: f64,
    normalization: &str,
    top_k: usize,
) -> PyResult<Vec<(String, f64)>> {
    let normalization = match normalization {
        "minmax" => Normalization::MinMax,
        "three_sigma" => Normalization::ThreeSigma,
        other => return Err(value(format!("unknown normalization `{other}`"))),
    };
    let cfg = retrieval::ConvexConfig {
        alpha,
        normalization,
        top_k,
    };
    Ok(pairs(&retrieval::fuse_convex(&ranked(lexical), &ranked(semantic), &cfg).map_err(value)?))
}

/// Context Precision over relevance flags in rank order.
#[pyfunction]
#[pyo3(signature = (flags, k = None))]
fn context_precision(flags: Vec<bool>, k: Option<usize>) -> f64 {
    let k = k.unwrap_or(flags.len());
    metrics::context_precision_from_flags(&flags, k)
}

#[pyfunction]
fn rouge_l(candidate: &str, reference: &str) -> f64 {
    metrics::rouge_l(candidate, reference)
}

#[pyfunction]
fn meteor(candidate: &str, reference: &str) -> f64 {
    metrics::meteor(candidate, reference)
}

fn metric_maps(means: Vec<BTreeMap<String, f64>>) -> PyResult<Vec<BTreeMap<Metric, f64>>> {
    means
        .into_iter()
        .map(|m| m.into_iter().map(|(k, v)| Ok((metric(&k)?, v))).collect())
        .collect()
}

/// Normalized mean per module over `[{metric: mean}]`.
#[pyfunction]
fn aggregate_generation(means: Vec<BTreeMap<String, f64>>) -> PyResult<Vec<f64>> {
    Ok(metrics::aggregate_generation(&metric_maps(means)?))
}

/// Index of the winning candidate.
#[pyfunction]
#[pyo3(signature = (means, metrics, elapsed = None, speed_threshold = None, seed = None))]
fn select(
    means: Vec<BTreeMap<String, f64>>,
    metrics: Vec<String>,
    elapsed: Option<Vec<f64>>,
    speed_threshold: Option<f64>,
    seed: Option<u64>,
) -> PyResult<usize> {
    let maps = metric_maps(means)?;
    let elapsed = elapsed.unwrap_or_else(|| vec![0.0; maps.len()]);
    if elapsed.len() != maps.len() {
        return Err(value("elapsed must have one entry per candidate"));
    }
    let cands: Vec<Scored> = maps.into_iter().zip(elapsed).map(|(m, t)| Scored::new(m, t)).collect();
    let metrics = metrics.iter().map(|m| metric(m)).collect::<PyResult<Vec<_>>>()?;
    optimizer::select(&cands, &metrics, speed_threshold, seed).map(|s| s.winner).map_err(runtime)
}

type Plan = Vec<(String, Vec<String>)>;

/// `[(node, [candidate labels])]` and the evaluation count of a config.
#[pyfunction]
fn plan(config: PathBuf) -> PyResult<(Plan, usize)> {
    let c = Config::from_file(&config).map_err(value)?;
    let nodes = c.plan().into_iter().map(|(k, labels)| (k.as_str().to_string(), labels)).collect();
    Ok((nodes, c.evaluation_count()))
}

/// Runs a sweep and returns the run summary as a dict.
#[pyfunction]
#[pyo3(signature = (config, out_dir, corpus = None, qa = None, mock_llm = false, workers = None, seed = None, resume = false))]
#[allow(clippy::too_many_arguments)]
fn optimize<'py>(
    py: Python<'py>,
    config: PathBuf,
    out_dir: PathBuf,
    corpus: Option<PathBuf>,
    qa: Option<PathBuf>,
    mock_llm: bool,
    workers: Option<usize>,
    seed: Option<u64>,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = RunOptions {
        config,
        corpus,
        qa,
        out_dir,
        mock_llm,
        workers,
        seed,
        resume,
    };
    let summary = py.detach(|| optimizer::optimize(&opts)).map_err(|e| match e.exit_code() {
        2 => value(e),
        _ => runtime(e),
    })?;
    to_py(py, &summary)
}

/// A pipeline exported by `optimize` as best_pipeline.toml.
#[pyclass(frozen)]
struct Pipeline {
    inner: pipeline::Pipeline,
}

#[pymethods]
impl Pipeline {
    #[staticmethod]
    #[pyo3(signature = (path, mock_llm = false))]
    fn load(path: PathBuf, mock_llm: bool) -> PyResult<Pipeline> {
        Ok(Pipeline {
            inner: pipeline::Pipeline::load(&path, mock_llm).map_err(value)?,
        })
    }

    /// `(answer, passage_ids)`.
    fn answer(&self, py: Python<'_>, question: &str) -> PyResult<(String, Vec<String>)> {
        let a = py.detach(|| self.inner.answer(question)).map_err(runtime)?;
        Ok((a.answer, a.passage_ids))
    }
}

#[pymodule(name = "ragsweep")]
fn ragsweep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Bm25>()?;
    m.add_class::<Pipeline>()?;
    m.add_function(wrap_pyfunction!(fuse_rrf, m)?)?;
    m.add_function(wrap_pyfunction!(fuse_convex, m)?)?;
    m.add_function(wrap_pyfunction!(context_precision, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(meteor, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_generation, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(optimize, m)?)?;
    Ok(())
}
