//! Query expansion: pass-through, LLM decomposition into single-hop
//! questions, and hypothetical-passage generation (HyDE).

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{LlmClient, LlmConfig, LlmError};
use crate::retrieval::{RankedList, RetrievalError, Retriever};
use crate::template::Template;
use crate::text::truncate_tokens;

pub const DEFAULT_HYDE_MAX_TOKENS: u32 = 64;

#[derive(Debug, Error)]
pub enum ExpansionError {
    #[error("query must be non-empty")]
    EmptyQuery,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionKind {
    Pass,
    Decompose,
    Hyde,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpandedQuery {
    pub qid: String,
    pub original: String,
    /// Never empty; every entry non-empty.
    pub variants: Vec<String>,
    pub kind: ExpansionKind,
}

pub fn default_decompose_template() -> &'static Template {
    static T: OnceLock<Template> = OnceLock::new();
    T.get_or_init(|| Template::new(include_str!("../prompts/query_decompose.txt"), &["query"]).unwrap())
}

pub fn default_hyde_template() -> &'static Template {
    static T: OnceLock<Template> = OnceLock::new();
    T.get_or_init(|| Template::new(include_str!("../prompts/hyde.txt"), &["query"]).unwrap())
}

fn require_query(query: &str) -> Result<(), ExpansionError> {
    if query.trim().is_empty() {
        Err(ExpansionError::EmptyQuery)
    } else {
        Ok(())
    }
}

pub fn expand_pass(qid: &str, query: &str) -> Result<ExpandedQuery, ExpansionError> {
    require_query(query)?;
    Ok(ExpandedQuery {
        qid: qid.to_string(),
        original: query.to_string(),
        variants: vec![query.to_string()],
        kind: ExpansionKind::Pass,
    })
}

/// Lines of the form `1. text` or `2) text`, with surrounding quotes removed.
pub fn parse_numbered_lines(text: &str) -> Vec<String> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\s*\d+\s*[.)]\s*(.+?)\s*$").unwrap());
    text.lines()
        .filter_map(|line| re.captures(line))
        .map(|c| c[1].trim_matches(|ch| ch == '"' || ch == '\'' || ch == '“' || ch == '”').trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn expand_decompose(
    qid: &str,
    query: &str,
    client: &LlmClient,
    cfg: &LlmConfig,
    template: Option<&Template>,
) -> Result<ExpandedQuery, ExpansionError> {
    require_query(query)?;
    let prompt = template.unwrap_or_else(|| default_decompose_template()).render(&[("query", query)]);
    let completion = client.chat(&prompt, cfg)?;
    let mut variants = parse_numbered_lines(&completion.text);
    if variants.is_empty() {
        log::warn!("query `{qid}`: decomposition output had no numbered questions; using the original query");
        variants.push(query.to_string());
    }
    Ok(ExpandedQuery {
        qid: qid.to_string(),
        original: query.to_string(),
        variants,
        kind: ExpansionKind::Decompose,
    })
}

/// One hypothetical passage, cut at the configured `max_tokens`
/// (whitespace tokens; 64 when unset).
pub fn expand_hyde(
    qid: &str,
    query: &str,
    client: &LlmClient,
    cfg: &LlmConfig,
    template: Option<&Template>,
) -> Result<ExpandedQuery, ExpansionError> {
    require_query(query)?;
    let max_tokens = cfg.max_tokens.unwrap_or(DEFAULT_HYDE_MAX_TOKENS);
    let cfg = LlmConfig {
        max_tokens: Some(max_tokens),
        ..cfg.clone()
    };
    let prompt = template.unwrap_or_else(|| default_hyde_template()).render(&[("query", query)]);
    let completion = client.chat(&prompt, &cfg)?;
    let mut passage = truncate_tokens(&completion.text, max_tokens as usize);
    if passage.is_empty() {
        log::warn!("query `{qid}`: empty hypothetical passage; using the original query");
        passage = query.to_string();
    }
    Ok(ExpandedQuery {
        qid: qid.to_string(),
        original: query.to_string(),
        variants: vec![passage],
        kind: ExpansionKind::Hyde,
    })
}

/// Per passage, the maximum score over all lists; re-sorted and truncated.
pub fn merge_max_score(qid: &str, producer: &str, lists: &[RankedList], top_k: usize) -> RankedList {
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for list in lists {
        for e in &list.entries {
            best.entry(&e.passage_id)
                .and_modify(|s| {
                    if e.score > *s {
                        *s = e.score
                    }
                })
                .or_insert(e.score);
        }
    }
    let scores = best.into_iter().map(|(id, s)| (id.to_string(), s)).collect();
    RankedList::from_scores(qid, producer, scores, top_k)
}

/// Retrieves `top_k` for every variant and merges by maximum score.
pub fn retrieve_expanded(
    eq: &ExpandedQuery,
    retriever: &dyn Retriever,
    top_k: usize,
) -> Result<RankedList, RetrievalError> {
    if eq.variants.len() == 1 {
        return retriever.retrieve(&eq.qid, &eq.variants[0], top_k);
    }
    let lists = eq
        .variants
        .iter()
        .map(|v| retriever.retrieve(&eq.qid, v, top_k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(merge_max_score(&eq.qid, &retriever.name(), &lists, top_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Passage, PassageStore};
    use crate::llm::MockBackend;
    use crate::retrieval::{Bm25Index, Bm25Params};
    use std::sync::Arc;

    fn client_with(f: impl Fn(&str) -> String + Send + Sync + 'static) -> LlmClient {
        LlmClient::new(Arc::new(MockBackend::new().with_chat_fn(move |p| Ok(f(p)))))
    }

    fn cfg() -> LlmConfig {
        LlmConfig::new("gpt-3.5-turbo").with_temperature(0.2)
    }

    #[test]
    fn pass_is_identity_and_idempotent() {
        let a = expand_pass("q", "what is BM25").unwrap();
        assert_eq!(a.variants, vec!["what is BM25"]);
        assert_eq!(a, expand_pass("q", "what is BM25").unwrap());
        assert!(matches!(expand_pass("q", ""), Err(ExpansionError::EmptyQuery)));
    }

    #[test]
    fn multi_hop_question_decomposes_into_three_steps() {
        let client = client_with(|_| {
            "1. \"Which river flows through Vienna?\"\n2. \"Where does that river rise?\"\n3. \"How high is that source?\"".into()
        });
        let q = "How high above sea level is the source of the river that flows through Vienna?";
        let eq = expand_decompose("q", q, &client, &cfg(), None).unwrap();
        assert_eq!(
            eq.variants,
            vec![
                "Which river flows through Vienna?",
                "Where does that river rise?",
                "How high is that source?"
            ]
        );
        assert_eq!(eq.kind, ExpansionKind::Decompose);
    }

    #[test]
    fn decompose_prompt_carries_the_query() {
        let client = client_with(|p| {
            assert!(p.ends_with("Question: Which river is longest?\n"));
            "1. Which river is longest?".into()
        });
        expand_decompose("q", "Which river is longest?", &client, &cfg(), None).unwrap();
    }

    #[test]
    fn unparsable_decomposition_falls_back_to_original() {
        let client = client_with(|_| "I cannot help with that.".into());
        let eq = expand_decompose("q", "single hop?", &client, &cfg(), None).unwrap();
        assert_eq!(eq.variants, vec!["single hop?"]);
    }

    #[test]
    fn default_mock_echo_still_yields_a_variant() {
        let client = LlmClient::mock();
        let eq = expand_decompose("q", "Who wrote Hamlet?", &client, &cfg(), None).unwrap();
        assert!(!eq.variants.is_empty());
        assert!(eq.variants.iter().all(|v| !v.is_empty()));
    }

    #[test]
    fn hyde_returns_one_truncated_passage() {
        let long: String = (0..200).map(|i| format!("w{i} ")).collect();
        let client = client_with(move |_| long.clone());
        let eq = expand_hyde("q", "How does a tide mill work?", &client, &cfg(), None).unwrap();
        assert_eq!(eq.variants.len(), 1);
        assert_eq!(eq.variants[0].split_whitespace().count(), 64);
        assert_eq!(eq.kind, ExpansionKind::Hyde);

        let short = cfg().with_max_tokens(5);
        let eq = expand_hyde("q", "How does a tide mill work?", &client, &short, None).unwrap();
        assert_eq!(eq.variants[0], "w0 w1 w2 w3 w4");
    }

    #[test]
    fn hyde_keeps_the_whole_hypothetical_passage() {
        let passage = "A tide mill stores sea water behind a gate at high tide and releases it through a wheel as the tide falls.";
        let client = client_with(move |_| passage.to_string());
        let eq = expand_hyde("q", "How does a tide mill work?", &client, &cfg(), None).unwrap();
        assert_eq!(eq.variants, vec![passage.to_string()]);
        assert_ne!(eq.variants[0], eq.original);
    }

    #[test]
    fn hyde_mock_is_deterministic() {
        let a = expand_hyde("q", "x?", &LlmClient::mock(), &cfg(), None).unwrap();
        let b = expand_hyde("q", "x?", &LlmClient::mock(), &cfg(), None).unwrap();
        assert_eq!(a, b);
    }

    fn five_passage_index() -> Bm25Index {
        let texts = ["apple banana", "banana cherry", "cherry date", "date elder", "elder fig"];
        let store = PassageStore::from_passages(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage {
                    passage_id: format!("p{i}"),
                    doc_id: format!("d{i}"),
                    position: 0,
                    text: t.to_string(),
                    prev_id: None,
                    next_id: None,
                    metadata: Default::default(),
                })
                .collect(),
        )
        .unwrap();
        Bm25Index::build(&store, Bm25Params::default()).unwrap()
    }

    fn variants(vs: &[&str]) -> ExpandedQuery {
        ExpandedQuery {
            qid: "q".into(),
            original: vs[0].into(),
            variants: vs.iter().map(|s| s.to_string()).collect(),
            kind: ExpansionKind::Decompose,
        }
    }

    #[test]
    fn single_and_duplicate_variants_match_plain_retrieval() {
        let index = five_passage_index();
        let plain = index.search("q", "banana", 3);
        assert_eq!(retrieve_expanded(&variants(&["banana"]), &index, 3).unwrap(), plain);
        let dup = retrieve_expanded(&variants(&["banana", "banana"]), &index, 3).unwrap();
        assert_eq!(dup.entries, plain.entries);
    }

    #[test]
    fn disjoint_variants_union_with_own_scores() {
        let index = five_passage_index();
        let merged = retrieve_expanded(&variants(&["apple", "fig"]), &index, 10).unwrap();
        // Oracle: score every passage under each variant, take the max.
        let a = index.score_all("apple");
        let f = index.score_all("fig");
        let ids = ["p0", "p1", "p2", "p3", "p4"];
        let mut expect: Vec<(String, f64)> = ids.iter().enumerate().map(|(i, id)| (id.to_string(), a[i].max(f[i]))).collect();
        expect.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        let got: Vec<(String, f64)> = merged.entries.iter().map(|e| (e.passage_id.clone(), e.score)).collect();
        assert_eq!(got, expect);
        assert_eq!(merged.score_of("p0"), Some(a[0]));
        assert_eq!(merged.score_of("p4"), Some(f[4]));
    }

    #[test]
    fn merge_is_order_insensitive() {
        let index = five_passage_index();
        let ab = retrieve_expanded(&variants(&["apple cherry", "date fig"]), &index, 4).unwrap();
        let ba = retrieve_expanded(&variants(&["date fig", "apple cherry"]), &index, 4).unwrap();
        assert_eq!(ab, ba);
    }
}
