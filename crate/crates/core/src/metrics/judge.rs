//! Judges and model-backed metrics.

use std::sync::{Arc, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{MetricError, RelevanceJudgment};
use crate::corpus::{Passage, QaRecord};
use crate::llm::{LlmClient, LlmConfig};
use crate::template::Template;

/// Binary relevance of a passage for a QA record.
pub trait RelevanceJudge: Send + Sync {
    fn name(&self) -> &str;
    fn is_relevant(&self, qa: &QaRecord, passage: &Passage) -> Result<bool, MetricError>;

    fn judge(&self, qa: &QaRecord, passage: &Passage) -> Result<RelevanceJudgment, MetricError> {
        Ok(RelevanceJudgment {
            qid: qa.qid.clone(),
            passage_id: passage.passage_id.clone(),
            relevant: self.is_relevant(qa, passage)?,
            judge: self.name().to_string(),
        })
    }
}

/// Membership in the record's gold passage ids.
#[derive(Debug, Clone, Copy, Default)]
pub struct GoldJudge;

impl RelevanceJudge for GoldJudge {
    fn name(&self) -> &str {
        "gold"
    }

    fn is_relevant(&self, qa: &QaRecord, passage: &Passage) -> Result<bool, MetricError> {
        if qa.gold_passage_ids.is_empty() {
            return Err(MetricError::NoGold { qid: qa.qid.clone() });
        }
        Ok(qa.gold_passage_ids.contains(&passage.passage_id))
    }
}

/// `Some(true)` for a reply starting with yes, `Some(false)` for no.
pub fn parse_verdict(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start()
        .chars()
        .skip_while(|c| !c.is_alphanumeric())
        .take_while(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" | "true" | "relevant" => Some(true),
        "no" | "false" | "irrelevant" => Some(false),
        _ => None,
    }
}

const VERDICT_RETRY: &str = "\nAnswer with exactly one word, yes or no.";

pub struct LlmJudge {
    client: Arc<LlmClient>,
    cfg: LlmConfig,
    template: Template,
}

impl LlmJudge {
    pub fn new(client: Arc<LlmClient>, cfg: LlmConfig) -> Self {
        LlmJudge {
            client,
            cfg,
            template: default_relevance_template().clone(),
        }
    }

    pub fn with_template(mut self, template: Template) -> Self {
        self.template = template;
        self
    }
}

pub fn default_relevance_template() -> &'static Template {
    static T: OnceLock<Template> = OnceLock::new();
    T.get_or_init(|| {
        Template::new(include_str!("../../prompts/context_relevance.txt"), &["question", "answer", "passage"])
            .unwrap()
    })
}

impl RelevanceJudge for LlmJudge {
    fn name(&self) -> &str {
        "llm"
    }

    fn is_relevant(&self, qa: &QaRecord, passage: &Passage) -> Result<bool, MetricError> {
        let prompt = self.template.render(&[
            ("question", &qa.question),
            ("answer", &qa.ground_truth_answer),
            ("passage", &passage.text),
        ]);
        if let Some(v) = parse_verdict(&self.client.chat(&prompt, &self.cfg)?.text) {
            return Ok(v);
        }
        let retry = format!("{prompt}{VERDICT_RETRY}");
        match parse_verdict(&self.client.chat(&retry, &self.cfg)?.text) {
            Some(v) => Ok(v),
            None => {
                log::warn!(
                    "query `{}`: no verdict for `{}` after retry; counted irrelevant",
                    qa.qid,
                    passage.passage_id
                );
                Ok(false)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemScoreMapping {
    /// Cosine as is; right when the embeddings are non-negative.
    #[default]
    Raw,
    /// `(1 + cos) / 2`.
    Shifted,
}

/// Embedding cosine of candidate and reference. A zero vector scores the
/// bottom of the scale.
pub fn sem_score(
    candidate: &str,
    reference: &str,
    client: &LlmClient,
    cfg: &LlmConfig,
    mapping: SemScoreMapping,
) -> Result<f64, MetricError> {
    let v = client.embed(&[candidate.to_string(), reference.to_string()], cfg)?;
    let cos = v[0].cosine(&v[1]).unwrap_or(match mapping {
        SemScoreMapping::Raw => 0.0,
        SemScoreMapping::Shifted => -1.0,
    });
    Ok(match mapping {
        SemScoreMapping::Raw => cos,
        SemScoreMapping::Shifted => (1.0 + cos) / 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GEvalAspect {
    Coherence,
    Consistency,
    Fluency,
    Relevance,
}

impl GEvalAspect {
    pub const ALL: [GEvalAspect; 4] = [
        GEvalAspect::Coherence,
        GEvalAspect::Consistency,
        GEvalAspect::Fluency,
        GEvalAspect::Relevance,
    ];

    pub fn template(self) -> &'static Template {
        static T: OnceLock<Vec<Template>> = OnceLock::new();
        let all = T.get_or_init(|| {
            [
                include_str!("../../prompts/g_eval_coherence.txt"),
                include_str!("../../prompts/g_eval_consistency.txt"),
                include_str!("../../prompts/g_eval_fluency.txt"),
                include_str!("../../prompts/g_eval_relevance.txt"),
            ]
            .into_iter()
            .map(|t| Template::new(t, &["query", "answer"]).unwrap())
            .collect()
        });
        &all[self as usize]
    }
}

/// An integer 1-5 at the start of the reply, optionally after `Score:`.
pub fn parse_g_eval_score(reply: &str) -> Option<u8> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?i)^\s*(?:score\s*:\s*)?([1-5])(\.\d|\d)?").unwrap());
    let c = re.captures(reply)?;
    if c.get(2).is_some() {
        return None;
    }
    c[1].parse().ok()
}

const SCORE_RETRY: &str = "\nRespond with only one integer from 1 to 5.";

/// `None` when the reply cannot be read as a score even after one retry.
pub fn g_eval_aspect(
    aspect: GEvalAspect,
    query: &str,
    answer: &str,
    client: &LlmClient,
    cfg: &LlmConfig,
) -> Result<Option<u8>, MetricError> {
    let prompt = aspect.template().render(&[("query", query), ("answer", answer)]);
    if let Some(s) = parse_g_eval_score(&client.chat(&prompt, cfg)?.text) {
        return Ok(Some(s));
    }
    let retry = format!("{prompt}{SCORE_RETRY}");
    Ok(parse_g_eval_score(&client.chat(&retry, cfg)?.text))
}

/// Mean of the four aspect scores, or `None` if any aspect is unreadable.
pub fn g_eval(query: &str, answer: &str, client: &LlmClient, cfg: &LlmConfig) -> Result<Option<f64>, MetricError> {
    let mut sum = 0.0;
    let mut failed = Vec::new();
    for aspect in GEvalAspect::ALL {
        match g_eval_aspect(aspect, query, answer, client, cfg)? {
            Some(s) => sum += f64::from(s),
            None => failed.push(aspect),
        }
    }
    if !failed.is_empty() {
        log::warn!("g_eval: unreadable score for {failed:?}; metric missing");
        return Ok(None);
    }
    Ok(Some(sum / GEvalAspect::ALL.len() as f64))
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;
    use crate::llm::MockBackend;

    fn qa(gold: &[&str]) -> QaRecord {
        QaRecord {
            qid: "q".into(),
            question: "what?".into(),
            ground_truth_answer: "that".into(),
            gold_passage_ids: gold.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn passage(id: &str) -> Passage {
        Passage {
            passage_id: id.into(),
            doc_id: "d".into(),
            position: 0,
            text: "text".into(),
            prev_id: None,
            next_id: None,
            metadata: Default::default(),
        }
    }

    fn pinned(reply: &'static str) -> Arc<LlmClient> {
        Arc::new(LlmClient::new(Arc::new(MockBackend::new().with_chat_fn(move |_| Ok(reply.into())))))
    }

    #[test]
    fn gold_judge_uses_membership() {
        assert!(GoldJudge.is_relevant(&qa(&["a"]), &passage("a")).unwrap());
        assert!(!GoldJudge.is_relevant(&qa(&["a"]), &passage("b")).unwrap());
        assert!(GoldJudge.is_relevant(&qa(&[]), &passage("b")).is_err());
    }

    #[test]
    fn llm_judge_yes_and_garbage() {
        let yes = LlmJudge::new(pinned("Yes."), LlmConfig::new("j"));
        assert!(yes.judge(&qa(&[]), &passage("x")).unwrap().relevant);
        let junk = LlmJudge::new(pinned("maybe"), LlmConfig::new("j"));
        assert!(!junk.is_relevant(&qa(&[]), &passage("x")).unwrap());
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_verdict("  **No** it is not"), Some(false));
        assert_eq!(parse_verdict("yes"), Some(true));
        assert_eq!(parse_verdict("yesterday"), None);
    }

    #[test]
    fn score_parsing_is_strict() {
        assert_eq!(parse_g_eval_score("4"), Some(4));
        assert_eq!(parse_g_eval_score("Score: 5\nbecause"), Some(5));
        assert_eq!(parse_g_eval_score("4.5"), None);
        assert_eq!(parse_g_eval_score("7"), None);
        assert_eq!(parse_g_eval_score("I think 3"), None);
        assert_eq!(parse_g_eval_score("12"), None);
    }

    #[test]
    fn g_eval_pinned_and_mixed() {
        let client = pinned("4");
        assert_eq!(g_eval("q", "a", &client, &LlmConfig::new("j")).unwrap(), Some(4.0));
        let n = Arc::new(AtomicUsize::new(0));
        let counter = n.clone();
        let mixed = LlmClient::new(Arc::new(MockBackend::new().with_chat_fn(move |p| {
            counter.fetch_add(1, Ordering::SeqCst);
            let s = if p.contains("Coherence (1-5)") || p.contains("Consistency (1-5)") { "5" } else { "1" };
            Ok(s.into())
        })));
        assert_eq!(g_eval("q", "a", &mixed, &LlmConfig::new("j")).unwrap(), Some(3.0));
        assert_eq!(n.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn g_eval_non_numeric_is_missing() {
        assert_eq!(g_eval("q", "a", &pinned("great answer"), &LlmConfig::new("j")).unwrap(), None);
    }

    #[test]
    fn sem_score_identity_symmetry_orthogonal() {
        let client = LlmClient::mock();
        let cfg = LlmConfig::new("e");
        let s = |a: &str, b: &str| sem_score(a, b, &client, &cfg, SemScoreMapping::Raw).unwrap();
        assert!((s("red fox", "red fox") - 1.0).abs() < 1e-12);
        assert_eq!(s("red fox", "blue whale"), s("blue whale", "red fox"));
        assert_eq!(s("alpha", "omega"), 0.0);
    }
}
