use std::sync::{Arc, OnceLock};

use regex::Regex;
use sha2::{Digest, Sha256};

use super::{Embedding, LlmBackend, LlmConfig, LlmError};
use crate::text::{bag_tokens, fnv1a64, term_set, terms};

pub const MOCK_EMBEDDING_DIM: usize = 256;

type ChatFn = Arc<dyn Fn(&str) -> Result<String, LlmError> + Send + Sync>;
type LogprobFn = Arc<dyn Fn(&str, &str) -> f64 + Send + Sync>;

/// Offline stand-in for a model provider. Every output is a pure function of
/// the request bytes.
///
/// * chat: `[mock:<8 hex digest>] ` followed by the last 48 whitespace tokens
///   of the prompt. Two judge shapes get graded replies instead: prompts
///   ending in `Score:` with `Question:` / `Answer:` fields get
///   `1 + round(4 * overlap(question, answer))`, and prompts ending in
///   `Verdict:` with `Target answer:` / `Passage:` fields get `yes` when at
///   least half of the answer terms occur in the passage.
/// * embed: counts of whitespace tokens hashed into `dim` buckets, L2-normalized.
/// * next-token log-probabilities: for relevance prompts of the form
///   `Query: .. Document: .. Relevant:`, `P(True) = 0.05 + 0.9 * overlap`
///   where overlap is the fraction of query terms present in the document.
/// * continuation log-probability: `ln 0.5` per continuation term found in
///   the prefix, `ln 0.01` otherwise.
#[derive(Clone)]
pub struct MockBackend {
    dim: usize,
    logprobs: bool,
    chat_fn: Option<ChatFn>,
    logprob_fn: Option<LogprobFn>,
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl MockBackend {
    pub fn new() -> Self {
        MockBackend {
            dim: MOCK_EMBEDDING_DIM,
            logprobs: true,
            chat_fn: None,
            logprob_fn: None,
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        self.dim = dim;
        self
    }

    pub fn without_logprobs(mut self) -> Self {
        self.logprobs = false;
        self
    }

    /// Replace the chat transform, e.g. to pin judge verdicts in tests.
    pub fn with_chat_fn(
        mut self,
        f: impl Fn(&str) -> Result<String, LlmError> + Send + Sync + 'static,
    ) -> Self {
        self.chat_fn = Some(Arc::new(f));
        self
    }

    /// Replace next-token log-probabilities: `f(prompt, candidate)`.
    pub fn with_logprob_fn(mut self, f: impl Fn(&str, &str) -> f64 + Send + Sync + 'static) -> Self {
        self.logprob_fn = Some(Arc::new(f));
        self
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        let mut counts = vec![0.0f64; self.dim];
        for tok in bag_tokens(text) {
            let bucket = (fnv1a64(tok.as_bytes()) % self.dim as u64) as usize;
            counts[bucket] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in &mut counts {
                *c /= norm;
            }
        }
        Embedding(counts)
    }

    pub fn echo(prompt: &str) -> String {
        let digest = hex::encode(&Sha256::digest(prompt.as_bytes())[..4]);
        let tokens: Vec<&str> = prompt.split_whitespace().collect();
        let tail = &tokens[tokens.len().saturating_sub(48)..];
        format!("[mock:{digest}] {}", tail.join(" "))
    }
}

fn score_prompt() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)Question:\s*(.*?)\s*\nAnswer:\s*(.*?)\s*\n.*Score:\s*$").unwrap())
}

fn verdict_prompt() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?s)Target answer:\s*(.*?)\s*\nPassage:\s*(.*?)\s*\n.*Verdict:\s*$").unwrap()
    })
}

fn judge_reply(prompt: &str) -> Option<String> {
    if let Some(c) = score_prompt().captures(prompt) {
        return Some(format!("{}", 1 + (4.0 * overlap(&c[1], &c[2])).round() as u8));
    }
    if let Some(c) = decompose_prompt().captures(prompt) {
        return Some(format!("1. {}", &c[1]));
    }
    verdict_prompt()
        .captures(prompt)
        .map(|c| if overlap(&c[1], &c[2]) >= 0.5 { "yes" } else { "no" }.to_string())
}

fn decompose_prompt() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)numbered line.*\nQuestion:\s*([^\n]*?)\s*$").unwrap())
}

fn relevance_prompt() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)Query:\s*(.*?)\s*Document:\s*(.*?)\s*Relevant:\s*$").unwrap())
}

/// Fraction of distinct query terms that occur in the passage.
fn overlap(query: &str, passage: &str) -> f64 {
    let q = term_set(query);
    if q.is_empty() {
        return 0.0;
    }
    let p = term_set(passage);
    q.iter().filter(|t| p.contains(*t)).count() as f64 / q.len() as f64
}

impl LlmBackend for MockBackend {
    fn name(&self) -> &str {
        "mock"
    }

    fn chat(&self, prompt: &str, _cfg: &LlmConfig) -> Result<String, LlmError> {
        match &self.chat_fn {
            Some(f) => f(prompt),
            None => Ok(judge_reply(prompt).unwrap_or_else(|| Self::echo(prompt))),
        }
    }

    fn embed(&self, texts: &[String], _cfg: &LlmConfig) -> Result<Vec<Embedding>, LlmError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }

    fn supports_logprobs(&self, _cfg: &LlmConfig) -> bool {
        self.logprobs
    }

    fn next_token_logprobs(
        &self,
        prompt: &str,
        candidates: &[&str],
        _cfg: &LlmConfig,
    ) -> Result<Vec<f64>, LlmError> {
        if !self.logprobs {
            return Err(LlmError::LogprobsUnsupported);
        }
        if let Some(f) = &self.logprob_fn {
            return Ok(candidates.iter().map(|c| f(prompt, c)).collect());
        }
        let Some(caps) = relevance_prompt().captures(prompt) else {
            let uniform = -(candidates.len().max(1) as f64).ln();
            return Ok(vec![uniform; candidates.len()]);
        };
        let p_true = 0.05 + 0.9 * overlap(&caps[1], &caps[2]);
        Ok(candidates
            .iter()
            .map(|c| match c.trim() {
                "True" | "true" => p_true.ln(),
                "False" | "false" => (1.0 - p_true).ln(),
                _ => 1e-6f64.ln(),
            })
            .collect())
    }

    fn continuation_logprob(
        &self,
        prefix: &str,
        continuation: &str,
        _cfg: &LlmConfig,
    ) -> Result<f64, LlmError> {
        if !self.logprobs {
            return Err(LlmError::LogprobsUnsupported);
        }
        let context = term_set(prefix);
        Ok(terms(continuation)
            .iter()
            .map(|t| if context.contains(t) { 0.5f64.ln() } else { 0.01f64.ln() })
            .sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_has_unit_norm_and_ignores_order() {
        let m = MockBackend::new();
        let a = m.embed_text("alpha beta gamma alpha");
        let b = m.embed_text("gamma alpha beta alpha");
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a, b);
        assert_eq!(a.dim(), MOCK_EMBEDDING_DIM);
    }

    #[test]
    fn punctuation_only_text_embeds_to_zero() {
        let m = MockBackend::new();
        assert_eq!(m.embed_text("?! --").norm(), 0.0);
    }

    #[test]
    fn judge_shaped_prompts_get_graded_replies() {
        let m = MockBackend::new();
        let cfg = LlmConfig::new("judge");
        let score = m.chat("Rate it.\nQuestion: red fox\nAnswer: the red fox\n\nReply.\nScore:", &cfg).unwrap();
        assert_eq!(score, "5");
        let none = m.chat("Question: red fox\nAnswer: blue whale\nScore:", &cfg).unwrap();
        assert_eq!(none, "1");
        let v = m.chat("Question: q\nTarget answer: red fox\nPassage: a red fox ran\nVerdict:", &cfg).unwrap();
        assert_eq!(v, "yes");
        let v = m.chat("Question: q\nTarget answer: red fox\nPassage: whales\nVerdict:", &cfg).unwrap();
        assert_eq!(v, "no");
    }

    #[test]
    fn echo_is_tagged_and_stable() {
        let out = MockBackend::echo("ping");
        assert!(out.starts_with("[mock:"));
        assert!(out.ends_with(" ping"));
        assert_eq!(out, MockBackend::echo("ping"));
    }

    #[test]
    fn relevance_probability_tracks_overlap() {
        let m = MockBackend::new();
        let cfg = LlmConfig::new("m");
        let hi = m
            .next_token_logprobs("Query: red fox Document: the red fox Relevant:", &["True", "False"], &cfg)
            .unwrap();
        let lo = m
            .next_token_logprobs("Query: red fox Document: a blue whale Relevant:", &["True", "False"], &cfg)
            .unwrap();
        assert!((hi[0].exp() - 0.95).abs() < 1e-12);
        assert!((lo[0].exp() - 0.05).abs() < 1e-12);
        assert!((hi[0].exp() + hi[1].exp() - 1.0).abs() < 1e-12);
    }
}
