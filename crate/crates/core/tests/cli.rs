use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ragsweep"))
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn ingest_defaults_split_a_thousand_tokens_into_three_passages() {
    let tmp = tempfile::tempdir().unwrap();
    let doc = tmp.path().join("long.txt");
    let words: Vec<String> = (0..1000).map(|i| format!("w{i}")).collect();
    std::fs::write(&doc, words.join(" ")).unwrap();
    let out = tmp.path().join("corpus.jsonl");
    let o = bin().arg("ingest").arg(&doc).arg("--out").arg(&out).output().unwrap();
    assert!(o.status.success());
    assert!(stdout(&o).contains("wrote 3 passages"), "{}", stdout(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn ingest_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = bin().arg("ingest").arg(&empty).arg("--out").arg(tmp.path().join("e.jsonl")).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let o = bin()
        .args(["ingest", "--chunk-size", "8", "--overlap", "8", "--out"])
        .arg(tmp.path().join("x.jsonl"))
        .arg(&empty)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().arg("ingest").arg(tmp.path().join("missing")).arg("--out").arg(tmp.path().join("m.jsonl")).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn optimize_rejects_bad_config_with_usage_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[[nodes]]\nname = \"retreival\"\n[[nodes.modules]]\nmodule = \"bm25\"\nbogus = 1\n").unwrap();
    let o = bin().arg("optimize").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("unknown node `retreival`"), "{err}");
}

#[test]
fn optimize_report_query_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = bin()
        .arg("--mock-llm")
        .arg("optimize")
        .arg("--config")
        .arg(root().join("configs/toy.toml"))
        .arg("--out-dir")
        .arg(&run)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = bin().arg("report").arg(&run).output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let tables: Vec<&str> = text.split("\n\n").collect();
    assert_eq!(tables.len(), 6);
    for t in tables {
        assert_eq!(t.lines().filter(|l| l.starts_with('*')).count(), 1, "{t}");
    }

    let ask = || {
        bin()
            .arg("--mock-llm")
            .arg("query")
            .arg("--pipeline")
            .arg(run.join("best_pipeline.toml"))
            .arg("How long does a new sourdough starter take to become active?")
            .output()
            .unwrap()
    };
    let (a, b) = (ask(), ask());
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("passages: "), "{}", stdout(&a));
}

#[test]
fn report_on_empty_dir_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin().arg("report").arg(tmp.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}
