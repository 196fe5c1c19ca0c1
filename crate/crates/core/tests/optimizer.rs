use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ragsweep::config::Config;
use ragsweep::corpus::{load_corpus, load_qa, Passage, PassageStore, QaRecord};
use ragsweep::llm::{LlmClient, LlmError, MockBackend, RetryPolicy};
use ragsweep::metrics::Metric;
use ragsweep::optimizer::{read_node_tables, OptimizeError, Optimizer, RunSummary};

fn toy() -> (PassageStore, Vec<QaRecord>) {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy");
    (load_corpus(root.join("corpus.jsonl")).unwrap(), load_qa(root.join("qa.jsonl")).unwrap())
}

fn config(toml: &str) -> Config {
    Config::from_toml_str(toml, Path::new(".")).unwrap()
}

fn run(toml: &str, client: LlmClient, workers: usize, out: &Path) -> Result<RunSummary, OptimizeError> {
    let (store, qa) = toy();
    Optimizer::new(config(toml), store, qa, client, Some(workers), None).unwrap().run(out, false)
}

const RETRIEVE_RERANK: &str = r#"
[[nodes]]
name = "retrieval"
top_k = 10
[[nodes.modules]]
module = "bm25"
[[nodes.modules]]
module = "vectordb"
[[nodes]]
name = "passage_reranker"
top_k = 5
[[nodes.modules]]
module = "pass_reranker"
[[nodes.modules]]
module = "monot5"
[[nodes.modules]]
module = "rankgpt"
"#;

#[test]
fn winner_outputs_feed_the_next_node() {
    let tmp = tempfile::tempdir().unwrap();
    let s = run(RETRIEVE_RERANK, LlmClient::mock(), 2, tmp.path()).unwrap();
    assert_eq!(s.nodes[0].output_checksum, s.nodes[1].input_checksum);
    assert_ne!(s.nodes[0].input_checksum, s.nodes[1].input_checksum);
}

#[test]
fn worker_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(RETRIEVE_RERANK, LlmClient::mock(), 1, a.path()).unwrap();
    run(RETRIEVE_RERANK, LlmClient::mock(), 8, b.path()).unwrap();
    let read = |d: &Path| std::fs::read(d.join("summary.json")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn reranker_improves_precision_at_five() {
    // Each question has four terms. Mock-embedding retrieval prefers the
    // distractors that repeat two of them; the gold passage has all four,
    // which the relevance scorer rewards.
    let mut passages = Vec::new();
    let mut qa = Vec::new();
    let solo = |id: String, text: String| Passage {
        passage_id: format!("{id}#0"),
        doc_id: id,
        position: 0,
        text,
        prev_id: None,
        next_id: None,
        metadata: Default::default(),
    };
    for i in 0..8 {
        let t: Vec<String> = ["alpha", "bravo", "charlie", "delta"].iter().map(|w| format!("{w}{i}")).collect();
        passages.push(solo(format!("gold{i}"), format!("{} with some unrelated words around here", t.join(" "))));
        for j in 0..3 {
            passages.push(solo(format!("near{i}_{j}"), format!("{a} {b} {a} {b} {a} {b}", a = t[j % 2], b = t[2 + j % 2])));
        }
        qa.push(QaRecord {
            qid: format!("q{i}"),
            question: t.join(" "),
            ground_truth_answer: "gold".into(),
            gold_passage_ids: vec![format!("gold{i}#0")],
        });
    }
    let store = PassageStore::from_passages(passages).unwrap();
    let toml = r#"
[[nodes]]
name = "retrieval"
top_k = 10
[[nodes.modules]]
module = "vectordb"
[[nodes]]
name = "passage_reranker"
top_k = 5
[[nodes.modules]]
module = "pass_reranker"
[[nodes.modules]]
module = "monot5"
"#;
    let tmp = tempfile::tempdir().unwrap();
    let s = Optimizer::new(config(toml), store, qa, LlmClient::mock(), Some(2), None).unwrap().run(tmp.path(), false).unwrap();
    let rerank = &s.nodes[1];
    let cp = |label: &str| rerank.candidates.iter().find(|c| c.label == label).unwrap().means[&Metric::ContextPrecision];
    assert!(cp("pass_reranker") < 0.5, "{}", cp("pass_reranker"));
    assert_eq!(cp("monot5"), 1.0);
    assert_eq!(rerank.winner, "monot5");
}

#[test]
fn per_node_artifacts_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    run(RETRIEVE_RERANK, LlmClient::mock(), 2, tmp.path()).unwrap();
    let tables = read_node_tables(tmp.path()).unwrap();
    assert_eq!(tables.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(), ["01_retrieval", "02_passage_reranker"]);
    assert_eq!(tables[1].rows.len(), 3);
    for t in &tables {
        assert!(t.selected_row().is_some());
    }
    for f in ["summary.json", "timing.json", "best_pipeline.toml", "01_retrieval/scores.csv", "02_passage_reranker/outputs.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let scores = std::fs::read_to_string(tmp.path().join("01_retrieval/scores.csv")).unwrap();
    // header + 2 candidates x 10 queries
    assert_eq!(scores.lines().count(), 21);
}

#[test]
fn resume_skips_completed_nodes() {
    let tmp = tempfile::tempdir().unwrap();
    let (store, qa) = toy();
    let first = Optimizer::new(config(RETRIEVE_RERANK), store.clone(), qa.clone(), LlmClient::mock(), Some(2), None).unwrap();
    let a = first.run(tmp.path(), false).unwrap();
    assert_eq!(first.evaluations_performed(), 5);
    let second = Optimizer::new(config(RETRIEVE_RERANK), store.clone(), qa.clone(), LlmClient::mock(), Some(2), None).unwrap();
    let b = second.run(tmp.path(), true).unwrap();
    assert_eq!(second.evaluations_performed(), 0);
    assert_eq!(a, b);

    // Changing the reranker node invalidates only that node.
    let edited = RETRIEVE_RERANK.replace("top_k = 5", "top_k = 4");
    let third = Optimizer::new(config(&edited), store, qa, LlmClient::mock(), Some(2), None).unwrap();
    third.run(tmp.path(), true).unwrap();
    assert_eq!(third.evaluations_performed(), 3);
}

#[test]
fn failed_queries_are_excluded_and_mostly_failing_candidates_disqualified() {
    // rankgpt chat calls fail; every other call goes to the default mock.
    let client = LlmClient::new(Arc::new(MockBackend::new().with_chat_fn(|p| {
        if p.contains("Rank the") || p.contains("passages") && p.contains('[') {
            Err(LlmError::Transport {
                endpoint: "test".into(),
                message: "down".into(),
            })
        } else {
            Ok(MockBackend::echo(p))
        }
    })))
    .with_retry(RetryPolicy::no_backoff(1));
    let tmp = tempfile::tempdir().unwrap();
    let s = run(RETRIEVE_RERANK, client, 2, tmp.path()).unwrap();
    let rankgpt = s.nodes[1].candidates.iter().find(|c| c.label == "rankgpt").unwrap();
    assert_eq!(rankgpt.failed_queries, 10);
    assert_eq!(rankgpt.excluded.as_deref(), Some("disqualified"));
    assert!(!rankgpt.selected);
}

#[test]
fn node_failure_keeps_earlier_artifacts() {
    let toml = r#"
[[nodes]]
name = "retrieval"
[[nodes.modules]]
module = "bm25"
[[nodes]]
name = "passage_reranker"
[[nodes.modules]]
module = "rankgpt"
"#;
    let client = LlmClient::new(Arc::new(MockBackend::new().with_chat_fn(|_| {
        Err(LlmError::Transport {
            endpoint: "test".into(),
            message: "down".into(),
        })
    })))
    .with_retry(RetryPolicy::no_backoff(1));
    let tmp = tempfile::tempdir().unwrap();
    let err = run(toml, client, 1, tmp.path()).unwrap_err();
    assert!(matches!(err, OptimizeError::NodeFailed { .. }), "{err}");
    assert!(tmp.path().join("01_retrieval.csv").exists());
    assert!(tmp.path().join("02_passage_reranker/error.txt").exists());
    assert!(!tmp.path().join("summary.json").exists());
}

#[test]
fn gold_judge_requires_gold_ids() {
    let (store, mut qa) = toy();
    qa[3].gold_passage_ids.clear();
    let err = Optimizer::new(config(RETRIEVE_RERANK), store, qa, LlmClient::mock(), None, None).err().unwrap();
    assert!(err.to_string().contains(&"q04".to_string()), "{err}");
}

#[test]
fn llm_judge_is_cached_per_query_and_passage() {
    let calls = Arc::new(AtomicUsize::new(0));
    let counter = calls.clone();
    let client = LlmClient::new(Arc::new(MockBackend::new().with_chat_fn(move |p| {
        if p.trim_end().ends_with("Verdict:") {
            counter.fetch_add(1, Ordering::SeqCst);
        }
        Ok("yes".into())
    })));
    let toml = r#"
[evaluation]
relevance_judge = "llm"
[[nodes]]
name = "retrieval"
top_k = 3
[[nodes.modules]]
module = "bm25"
[[nodes.modules]]
module = "hybrid_cc"
"#;
    let tmp = tempfile::tempdir().unwrap();
    let s = run(toml, client, 2, tmp.path()).unwrap();
    assert_eq!(s.nodes[0].selection_value, Some(1.0));
    // At most one verdict per distinct (query, passage) pair.
    assert!(calls.load(Ordering::SeqCst) <= 10 * 6);
}

#[test]
fn seeded_ties_are_reproducible() {
    let toml = r#"
[[nodes]]
name = "retrieval"
[[nodes.modules]]
module = "bm25"
k1 = [1.2, 1.5]
"#;
    let pick = |seed| {
        let (store, qa) = toy();
        let tmp = tempfile::tempdir().unwrap();
        Optimizer::new(config(toml), store, qa, LlmClient::mock(), Some(1), seed).unwrap().run(tmp.path(), false).unwrap().nodes[0]
            .winner
            .clone()
    };
    assert_eq!(pick(Some(3)), pick(Some(3)));
    assert_eq!(pick(None), pick(None));
}

#[test]
fn exported_pipeline_answers_questions() {
    let tmp = tempfile::tempdir().unwrap();
    let (store, qa) = toy();
    let root: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy/corpus.jsonl");
    let opt = Optimizer::new(config(RETRIEVE_RERANK), store, qa, LlmClient::mock(), Some(2), None)
        .unwrap()
        .with_corpus_path(root);
    opt.run(tmp.path(), false).unwrap();
    let p = ragsweep::pipeline::Pipeline::load(&tmp.path().join("best_pipeline.toml"), true).unwrap();
    let a = p.answer("Who invented the Fresnel lens?").unwrap();
    let b = p.answer("Who invented the Fresnel lens?").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.passage_ids.len(), 5);
    assert!(a.passage_ids.contains(&"lighthouses#1".to_string()), "{:?}", a.passage_ids);
}
