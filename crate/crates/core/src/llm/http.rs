use std::time::Duration;

use serde::Deserialize;
use serde_json::{json, Value};

use super::{Embedding, LlmBackend, LlmConfig, LlmError};

/// Client for OpenAI-compatible `/chat/completions`, `/embeddings` and
/// `/completions` endpoints. The API key is read from the environment
/// variable named in [`LlmConfig::api_key_env`] on every request.
pub struct HttpBackend {
    agent: ureq::Agent,
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new(Duration::from_secs(120))
    }
}

impl HttpBackend {
    pub fn new(timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        HttpBackend {
            agent: ureq::Agent::new_with_config(config),
        }
    }

    fn post(&self, cfg: &LlmConfig, path: &str, body: &Value) -> Result<Value, LlmError> {
        let endpoint = format!("{}/{}", cfg.endpoint_url.trim_end_matches('/'), path);
        let mut req = self.agent.post(&endpoint).header("Content-Type", "application/json");
        if !cfg.api_key_env.is_empty() {
            let key = std::env::var(&cfg.api_key_env)
                .map_err(|_| LlmError::MissingApiKey(cfg.api_key_env.clone()))?;
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| LlmError::Transport {
            endpoint: endpoint.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| LlmError::Transport {
            endpoint: endpoint.clone(),
            message: e.to_string(),
        })?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Status {
                endpoint,
                status,
                body: text.chars().take(512).collect(),
            });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Malformed {
            endpoint,
            message: e.to_string(),
        })
    }
}

pub(crate) fn chat_request(prompt: &str, cfg: &LlmConfig) -> Value {
    let mut body = json!({
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": cfg.temperature,
    });
    if let Some(max) = cfg.max_tokens {
        body["max_tokens"] = json!(max);
    }
    body
}

fn malformed(cfg: &LlmConfig, message: impl Into<String>) -> LlmError {
    LlmError::Malformed {
        endpoint: cfg.endpoint_url.clone(),
        message: message.into(),
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Vec<TokenLogprob>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    #[serde(default)]
    index: usize,
    embedding: Vec<f64>,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    logprobs: CompletionLogprobs,
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

pub(crate) fn parse_chat(cfg: &LlmConfig, body: Value) -> Result<String, LlmError> {
    let resp: ChatResponse = serde_json::from_value(body).map_err(|e| malformed(cfg, e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .ok_or_else(|| malformed(cfg, "no completion choice"))
}

pub(crate) fn parse_embeddings(cfg: &LlmConfig, body: Value, expected: usize) -> Result<Vec<Embedding>, LlmError> {
    let mut resp: EmbeddingResponse =
        serde_json::from_value(body).map_err(|e| malformed(cfg, e.to_string()))?;
    if resp.data.len() != expected {
        return Err(malformed(cfg, format!("{} embeddings for {expected} inputs", resp.data.len())));
    }
    resp.data.sort_by_key(|d| d.index);
    Ok(resp.data.into_iter().map(|d| Embedding(d.embedding)).collect())
}

/// Tokens outside the returned top list get this floor.
const LOGPROB_FLOOR: f64 = -30.0;

impl LlmBackend for HttpBackend {
    fn name(&self) -> &str {
        "http"
    }

    fn chat(&self, prompt: &str, cfg: &LlmConfig) -> Result<String, LlmError> {
        let body = self.post(cfg, "chat/completions", &chat_request(prompt, cfg))?;
        parse_chat(cfg, body)
    }

    fn embed(&self, texts: &[String], cfg: &LlmConfig) -> Result<Vec<Embedding>, LlmError> {
        let body = self.post(cfg, "embeddings", &json!({"model": cfg.model_name, "input": texts}))?;
        parse_embeddings(cfg, body, texts.len())
    }

    fn supports_logprobs(&self, cfg: &LlmConfig) -> bool {
        cfg.logprobs
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[&str],
        cfg: &LlmConfig,
    ) -> Result<Vec<f64>, LlmError> {
        if !cfg.logprobs {
            return Err(LlmError::LogprobsUnsupported);
        }
        let mut req = chat_request(prompt, cfg);
        req["max_tokens"] = json!(1);
        req["logprobs"] = json!(true);
        req["top_logprobs"] = json!(20);
        let body = self.post(cfg, "chat/completions", &req)?;
        let resp: ChatResponse = serde_json::from_value(body).map_err(|e| malformed(cfg, e.to_string()))?;
        let top = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.logprobs)
            .and_then(|l| l.content.into_iter().next())
            .ok_or_else(|| malformed(cfg, "response carries no logprobs"))?
            .top_logprobs;
        Ok(candidates
            .iter()
            .map(|cand| {
                top.iter()
                    .filter(|t| t.token.trim() == cand.trim())
                    .map(|t| t.logprob)
                    .fold(LOGPROB_FLOOR, f64::max)
            })
            .collect())
    }

    fn continuation_logprob(
        &self,
        prefix: &str,
        continuation: &str,
        cfg: &LlmConfig,
    ) -> Result<f64, LlmError> {
        if !cfg.logprobs {
            return Err(LlmError::LogprobsUnsupported);
        }
        let req = json!({
            "model": cfg.model_name,
            "prompt": format!("{prefix}{continuation}"),
            "echo": true,
            "logprobs": 0,
            "max_tokens": 0,
            "temperature": cfg.temperature,
        });
        let body = self.post(cfg, "completions", &req)?;
        let resp: CompletionResponse =
            serde_json::from_value(body).map_err(|e| malformed(cfg, e.to_string()))?;
        let lp = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| malformed(cfg, "no completion choice"))?
            .logprobs;
        Ok(lp
            .token_logprobs
            .iter()
            .zip(&lp.text_offset)
            .filter(|(_, off)| **off >= prefix.len())
            .filter_map(|(l, _)| *l)
            .sum())
    }
}
