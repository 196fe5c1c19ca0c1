//! Chat-completion and embedding access behind one client.
//!
//! [`LlmClient`] owns a backend (the OpenAI-compatible [`HttpBackend`] or the
//! deterministic [`MockBackend`]), an optional persistent [`ResponseCache`],
//! a request-rate limiter and the retry policy. Every other module talks to
//! language models only through this type, so the whole optimizer can run
//! offline against the mock.

mod cache;
mod http;
mod mock;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheKey, ResponseCache};
pub use http::HttpBackend;
pub use mock::{MockBackend, MOCK_EMBEDDING_DIM};

/// Endpoint and sampling parameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LlmConfig {
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default = "default_endpoint")]
    pub endpoint_url: String,
    /// Name of the environment variable holding the API key. Empty means
    /// the endpoint takes no credentials.
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    /// Whether the endpoint returns token log-probabilities.
    #[serde(default)]
    pub logprobs: bool,
}

fn default_endpoint() -> String {
    "https://api.openai.com/v1".to_string()
}

fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

impl LlmConfig {
    pub fn new(model_name: impl Into<String>) -> Self {
        LlmConfig {
            model_name: model_name.into(),
            temperature: 0.0,
            max_tokens: None,
            endpoint_url: default_endpoint(),
            api_key_env: default_api_key_env(),
            logprobs: false,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = Some(max_tokens);
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.model_name.trim().is_empty() {
            return Err(LlmError::Config("model_name must be non-empty".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::Config(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == Some(0) {
            return Err(LlmError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// A dense vector produced by an embedding model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Cosine similarity; `None` when either vector has zero norm.
    pub fn cosine(&self, other: &Embedding) -> Option<f64> {
        debug_assert_eq!(self.dim(), other.dim());
        let (na, nb) = (self.norm(), other.norm());
        if na == 0.0 || nb == 0.0 {
            return None;
        }
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        Some(dot / (na * nb))
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("embedding input must be a non-empty list of non-empty texts")]
    EmptyInput,
    #[error("invalid llm config: {0}")]
    Config(String),
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("transport failure calling {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint} returned HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("malformed response from {endpoint}: {message}")]
    Malformed { endpoint: String, message: String },
    #[error("endpoint does not expose token log-probabilities")]
    LogprobsUnsupported,
    #[error("response cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl LlmError {
    /// Transport failures, rate limiting and server errors are worth another try.
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport { .. } => true,
            LlmError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// The wire-level operations a model provider offers.
pub trait LlmBackend: Send + Sync {
    fn name(&self) -> &str;

    fn chat(&self, prompt: &str, cfg: &LlmConfig) -> Result<String, LlmError>;

    fn embed(&self, texts: &[String], cfg: &LlmConfig) -> Result<Vec<Embedding>, LlmError>;

    fn supports_logprobs(&self, _cfg: &LlmConfig) -> bool {
        false
    }

    /// Log-probability of each candidate being the first generated token.
    fn next_token_logprobs(
        &self,
        _prompt: &str,
        _candidates: &[&str],
        _cfg: &LlmConfig,
    ) -> Result<Vec<f64>, LlmError> {
        Err(LlmError::LogprobsUnsupported)
    }

    /// Summed log-probability of `continuation` following `prefix`.
    fn continuation_logprob(
        &self,
        _prefix: &str,
        _continuation: &str,
        _cfg: &LlmConfig,
    ) -> Result<f64, LlmError> {
        Err(LlmError::LogprobsUnsupported)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn no_backoff(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            initial_backoff: Duration::ZERO,
        }
    }
}

/// Spaces requests at least `1 / requests_per_second` apart.
#[derive(Debug)]
struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Instant>,
}

impl RateLimiter {
    fn new(requests_per_second: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next_slot: Mutex::new(Instant::now()),
        }
    }

    fn acquire(&self) {
        let wait = {
            let mut next = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = (*next).max(now);
            *next = slot + self.interval;
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// A chat completion plus how long it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub elapsed: Duration,
    pub cached: bool,
}

pub struct LlmClient {
    backend: Arc<dyn LlmBackend>,
    cache: Option<ResponseCache>,
    limiter: Option<RateLimiter>,
    retry: RetryPolicy,
    backend_calls: AtomicU64,
}

impl std::fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LlmClient")
            .field("backend", &self.backend.name())
            .field("cached", &self.cache.is_some())
            .field("retry", &self.retry)
            .finish()
    }
}

impl LlmClient {
    pub fn new(backend: Arc<dyn LlmBackend>) -> Self {
        LlmClient {
            backend,
            cache: None,
            limiter: None,
            retry: RetryPolicy::default(),
            backend_calls: AtomicU64::new(0),
        }
    }

    /// Client over the default deterministic mock, with an in-memory cache.
    pub fn mock() -> Self {
        LlmClient::new(Arc::new(MockBackend::new())).with_cache(ResponseCache::in_memory())
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_rate_limit(mut self, requests_per_second: f64) -> Self {
        if requests_per_second.is_finite() && requests_per_second > 0.0 {
            self.limiter = Some(RateLimiter::new(requests_per_second));
        }
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Number of requests that reached the backend (cache hits excluded).
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }

    pub fn supports_logprobs(&self, cfg: &LlmConfig) -> bool {
        self.backend.supports_logprobs(cfg)
    }

    fn call<T>(&self, mut op: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let attempts = self.retry.attempts.max(1);
        let mut backoff = self.retry.initial_backoff;
        let mut attempt = 1;
        loop {
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            self.backend_calls.fetch_add(1, Ordering::Relaxed);
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}; retrying in {backoff:?}");
                    std::thread::sleep(backoff);
                    backoff *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn cached<T>(
        &self,
        key: &CacheKey,
        compute: impl FnOnce() -> Result<T, LlmError>,
    ) -> Result<(T, bool), LlmError>
    where
        T: Serialize + serde::de::DeserializeOwned,
    {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(key) {
                if let Ok(v) = serde_json::from_value(hit) {
                    return Ok((v, true));
                }
            }
        }
        let value = compute()?;
        if let Some(cache) = &self.cache {
            let json = serde_json::to_value(&value).expect("cache values serialize");
            cache.put(key, json)?;
        }
        Ok((value, false))
    }

    pub fn chat(&self, prompt: &str, cfg: &LlmConfig) -> Result<Completion, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        cfg.validate()?;
        let start = Instant::now();
        let key = CacheKey::new("chat", cfg, prompt);
        let (text, cached) = self.cached(&key, || self.call(|| self.backend.chat(prompt, cfg)))?;
        Ok(Completion {
            text,
            elapsed: start.elapsed(),
            cached,
        })
    }

    /// One vector per input text. Cache lookups are per text; misses are sent
    /// to the backend in a single batch.
    pub fn embed(&self, texts: &[String], cfg: &LlmConfig) -> Result<Vec<Embedding>, LlmError> {
        if texts.is_empty() || texts.iter().any(|t| t.trim().is_empty()) {
            return Err(LlmError::EmptyInput);
        }
        cfg.validate()?;
        let keys: Vec<CacheKey> = texts.iter().map(|t| CacheKey::new("embed", cfg, t)).collect();
        let mut out: Vec<Option<Embedding>> = keys
            .iter()
            .map(|k| {
                self.cache
                    .as_ref()
                    .and_then(|c| c.get(k))
                    .and_then(|v| serde_json::from_value(v).ok())
            })
            .collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let vectors = self.call(|| self.backend.embed(&batch, cfg))?;
            if vectors.len() != batch.len() {
                return Err(LlmError::Malformed {
                    endpoint: cfg.endpoint_url.clone(),
                    message: format!("{} embeddings for {} inputs", vectors.len(), batch.len()),
                });
            }
            for (&i, v) in missing.iter().zip(vectors) {
                if !v.is_finite() {
                    return Err(LlmError::Malformed {
                        endpoint: cfg.endpoint_url.clone(),
                        message: "embedding contains non-finite values".into(),
                    });
                }
                if let Some(cache) = &self.cache {
                    cache.put(&keys[i], serde_json::to_value(&v).expect("vectors serialize"))?;
                }
                out[i] = Some(v);
            }
        }
        let out: Vec<Embedding> = out.into_iter().map(|v| v.expect("filled")).collect();
        let dim = out[0].dim();
        if out.iter().any(|v| v.dim() != dim) {
            return Err(LlmError::Malformed {
                endpoint: cfg.endpoint_url.clone(),
                message: "embeddings of differing dimension".into(),
            });
        }
        Ok(out)
    }

    pub fn embed_one(&self, text: &str, cfg: &LlmConfig) -> Result<Embedding, LlmError> {
        let mut v = self.embed(&[text.to_string()], cfg)?;
        Ok(v.remove(0))
    }

    pub fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[&str],
        cfg: &LlmConfig,
    ) -> Result<Vec<f64>, LlmError> {
        if prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        if !self.supports_logprobs(cfg) {
            return Err(LlmError::LogprobsUnsupported);
        }
        let input = format!("{}\u{1f}{}", candidates.join("\u{1e}"), prompt);
        let key = CacheKey::new("next_token_logprobs", cfg, &input);
        self.cached(&key, || {
            self.call(|| self.backend.next_token_logprobs(prompt, candidates, cfg))
        })
        .map(|(v, _)| v)
    }

    pub fn continuation_logprob(
        &self,
        prefix: &str,
        continuation: &str,
        cfg: &LlmConfig,
    ) -> Result<f64, LlmError> {
        if continuation.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        if !self.supports_logprobs(cfg) {
            return Err(LlmError::LogprobsUnsupported);
        }
        let input = format!("{prefix}\u{1f}{continuation}");
        let key = CacheKey::new("continuation_logprob", cfg, &input);
        self.cached(&key, || {
            self.call(|| self.backend.continuation_logprob(prefix, continuation, cfg))
        })
        .map(|(v, _)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn cfg() -> LlmConfig {
        LlmConfig::new("mock-model")
    }

    #[test]
    fn mock_chat_is_deterministic() {
        let a = LlmClient::new(Arc::new(MockBackend::new()));
        let b = LlmClient::new(Arc::new(MockBackend::new()));
        assert_eq!(a.chat("ping", &cfg()).unwrap().text, b.chat("ping", &cfg()).unwrap().text);
        assert_ne!(a.chat("ping", &cfg()).unwrap().text, a.chat("pong", &cfg()).unwrap().text);
    }

    #[test]
    fn second_identical_chat_is_served_from_cache() {
        let client = LlmClient::mock();
        let first = client.chat("ping", &cfg()).unwrap();
        assert_eq!(client.backend_calls(), 1);
        let second = client.chat("ping", &cfg()).unwrap();
        assert_eq!(client.backend_calls(), 1);
        assert!(second.cached && !first.cached);
        assert_eq!(first.text, second.text);
    }

    #[test]
    fn cache_key_includes_sampling_parameters() {
        let client = LlmClient::mock();
        client.chat("ping", &cfg()).unwrap();
        client.chat("ping", &cfg().with_temperature(0.7)).unwrap();
        client.chat("ping", &cfg().with_max_tokens(8)).unwrap();
        assert_eq!(client.backend_calls(), 3);
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let client = LlmClient::mock();
        assert!(matches!(client.chat("  ", &cfg()), Err(LlmError::EmptyPrompt)));
        assert_eq!(client.backend_calls(), 0);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let client = LlmClient::mock();
        assert!(matches!(
            client.chat("x", &cfg().with_temperature(-0.1)),
            Err(LlmError::Config(_))
        ));
        assert!(matches!(client.chat("x", &LlmConfig::new("")), Err(LlmError::Config(_))));
    }

    #[test]
    fn mock_embeddings_identical_for_identical_text() {
        let client = LlmClient::mock();
        let v = client.embed(&["a b".into(), "a b".into()], &cfg()).unwrap();
        assert_eq!(v[0], v[1]);
        assert!((v[0].cosine(&v[1]).unwrap() - 1.0).abs() < 1e-12);
        assert!((v[0].norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn embed_rejects_empty_input() {
        let client = LlmClient::mock();
        assert!(matches!(client.embed(&[], &cfg()), Err(LlmError::EmptyInput)));
        assert!(matches!(client.embed(&["".into()], &cfg()), Err(LlmError::EmptyInput)));
    }

    #[test]
    fn embed_batches_only_cache_misses() {
        let client = LlmClient::mock();
        client.embed(&["a".into()], &cfg()).unwrap();
        client.embed(&["a".into(), "b".into()], &cfg()).unwrap();
        assert_eq!(client.backend_calls(), 2);
        client.embed(&["b".into(), "a".into()], &cfg()).unwrap();
        assert_eq!(client.backend_calls(), 2);
    }

    #[test]
    fn transient_failures_are_retried_then_surface_status() {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let backend = MockBackend::new().with_chat_fn(move |_| {
            seen.fetch_add(1, Ordering::SeqCst);
            Err(LlmError::Status {
                endpoint: "mock://chat".into(),
                status: 503,
                body: String::new(),
            })
        });
        let client = LlmClient::new(Arc::new(backend)).with_retry(RetryPolicy::no_backoff(3));
        let err = client.chat("x", &cfg()).unwrap_err();
        assert!(matches!(err, LlmError::Status { status: 503, .. }));
        assert!(err.to_string().contains("mock://chat"));
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn recovery_after_transport_failure() {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let backend = MockBackend::new().with_chat_fn(move |p| {
            if seen.fetch_add(1, Ordering::SeqCst) == 0 {
                Err(LlmError::Transport {
                    endpoint: "mock".into(),
                    message: "reset".into(),
                })
            } else {
                Ok(format!("ok {p}"))
            }
        });
        let client = LlmClient::new(Arc::new(backend)).with_retry(RetryPolicy::no_backoff(3));
        assert_eq!(client.chat("x", &cfg()).unwrap().text, "ok x");
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let calls = Arc::new(AtomicU32::new(0));
        let seen = calls.clone();
        let backend = MockBackend::new().with_chat_fn(move |_| {
            seen.fetch_add(1, Ordering::SeqCst);
            Err(LlmError::Status {
                endpoint: "mock".into(),
                status: 401,
                body: "bad key".into(),
            })
        });
        let client = LlmClient::new(Arc::new(backend)).with_retry(RetryPolicy::no_backoff(3));
        assert!(client.chat("x", &cfg()).is_err());
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn logprobs_unavailable_without_capability() {
        let client = LlmClient::new(Arc::new(MockBackend::new().without_logprobs()));
        assert!(!client.supports_logprobs(&cfg()));
        assert!(matches!(
            client.next_token_logprobs("q", &["True"], &cfg()),
            Err(LlmError::LogprobsUnsupported)
        ));
    }

    #[test]
    fn rate_limiter_spaces_requests() {
        let client = LlmClient::new(Arc::new(MockBackend::new())).with_rate_limit(50.0);
        let start = Instant::now();
        for i in 0..4 {
            client.chat(&format!("p{i}"), &cfg()).unwrap();
        }
        assert!(start.elapsed() >= Duration::from_millis(55));
    }

    #[test]
    fn cosine_of_zero_vector_is_undefined() {
        let z = Embedding(vec![0.0, 0.0]);
        let v = Embedding(vec![1.0, 0.0]);
        assert_eq!(z.cosine(&v), None);
        let scaled = Embedding(vec![3.0, 0.0]);
        assert!((v.cosine(&scaled).unwrap() - 1.0).abs() < 1e-15);
    }
}
