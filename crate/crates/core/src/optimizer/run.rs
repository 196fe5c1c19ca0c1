use std::path::PathBuf;

use thiserror::Error;

use super::{OptimizeError, Optimizer, RunSummary};
use crate::config::{Config, ConfigError};
use crate::corpus::{load_corpus, load_qa, CorpusError};
use crate::pipeline::{build_client, PipelineError};

/// Inputs of one optimization run, as given on the command line.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    /// Overrides the config's `corpus`.
    pub corpus: Option<PathBuf>,
    /// Overrides the config's `qa`.
    pub qa: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub mock_llm: bool,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub resume: bool,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
}

impl RunError {
    /// 2 for bad configuration or arguments, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Usage(_) => 2,
            _ => 1,
        }
    }
}

/// Loads everything `opts` names and builds the optimizer without running it.
pub fn prepare(opts: &RunOptions) -> Result<Optimizer, RunError> {
    let config = Config::from_file(&opts.config)?;
    let corpus = opts
        .corpus
        .clone()
        .or_else(|| config.corpus.clone())
        .ok_or_else(|| RunError::Usage("no corpus given (set `corpus` in the config or pass --corpus)".into()))?;
    let qa = opts
        .qa
        .clone()
        .or_else(|| config.qa.clone())
        .ok_or_else(|| RunError::Usage("no QA set given (set `qa` in the config or pass --qa)".into()))?;
    if opts.workers == Some(0) {
        return Err(RunError::Usage("--workers must be at least 1".into()));
    }
    let store = load_corpus(&corpus)?;
    let qa = load_qa(&qa)?;
    let client = build_client(&config.run, opts.mock_llm)?;
    let optimizer = Optimizer::new(config, store, qa, client, opts.workers, opts.seed)
        .map_err(|e| match e {
            OptimizeError::Setup(m) => RunError::Usage(m),
            other => RunError::Optimize(other),
        })?
        .with_corpus_path(corpus);
    Ok(optimizer)
}

/// Runs a full sweep and writes its artifacts to `opts.out_dir`.
pub fn optimize(opts: &RunOptions) -> Result<RunSummary, RunError> {
    let optimizer = prepare(opts)?;
    Ok(optimizer.run(&opts.out_dir, opts.resume)?)
}
