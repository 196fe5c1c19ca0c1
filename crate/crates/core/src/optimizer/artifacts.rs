use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{checksum, NodeOutcome, OptimizeError};
use crate::config::NodeKind;
use crate::pipeline::QueryState;

fn io_err(path: &Path, e: impl std::fmt::Display) -> OptimizeError {
    OptimizeError::Artifact {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn node_dir_name(index: usize, node: NodeKind) -> String {
    format!("{:02}_{}", index + 1, node.as_str())
}

pub(super) fn create_dir(dir: &Path) -> Result<(), OptimizeError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub(super) fn write_text(path: &Path, text: &str) -> Result<(), OptimizeError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub(super) fn write_json(path: &Path, value: &impl Serialize) -> Result<(), OptimizeError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_text(path, &(text + "\n"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Writes the node table, per-query scores and winner outputs. `done.json`
/// goes last and marks the node complete for `--resume`.
pub(super) fn write_node(out_dir: &Path, index: usize, outcome: &NodeOutcome) -> Result<(), OptimizeError> {
    let name = node_dir_name(index, outcome.node);
    let table = out_dir.join(format!("{name}.csv"));
    let mut w = csv::Writer::from_path(&table).map_err(|e| io_err(&table, e))?;
    let mut header = vec!["module".to_string(), "params".to_string()];
    header.extend(outcome.metrics.iter().map(|m| m.to_string()));
    header.extend(["failed_queries", "mean_elapsed_seconds", "value", "selected"].map(String::from));
    w.write_record(&header).map_err(|e| io_err(&table, e))?;
    for r in &outcome.records {
        let mut row = vec![r.label.clone(), r.params.to_string()];
        row.extend(outcome.metrics.iter().map(|m| fmt_opt(r.means.get(m).copied())));
        row.push(r.failed_queries.to_string());
        row.push(format!("{:.6}", r.mean_elapsed_seconds));
        row.push(fmt_opt(r.value));
        row.push(r.selected.to_string());
        w.write_record(&row).map_err(|e| io_err(&table, e))?;
    }
    w.flush().map_err(|e| io_err(&table, e))?;

    let dir = out_dir.join(&name);
    create_dir(&dir)?;
    let _ = fs::remove_file(dir.join("error.txt"));
    let scores = dir.join("scores.csv");
    let mut w = csv::Writer::from_path(&scores).map_err(|e| io_err(&scores, e))?;
    w.write_record(["module", "qid", "metric", "value", "elapsed_seconds", "error"])
        .map_err(|e| io_err(&scores, e))?;
    for r in &outcome.records {
        for q in &r.queries {
            let elapsed = format!("{:.6}", q.elapsed_seconds);
            let error = q.error.clone().unwrap_or_default();
            if q.values.is_empty() {
                w.write_record([r.label.as_str(), &q.qid, "", "", &elapsed, &error])
                    .map_err(|e| io_err(&scores, e))?;
            }
            for (m, v) in &q.values {
                w.write_record([r.label.as_str(), &q.qid, m.as_str(), &fmt_opt(*v), &elapsed, &error])
                    .map_err(|e| io_err(&scores, e))?;
            }
        }
    }
    w.flush().map_err(|e| io_err(&scores, e))?;
    write_json(&dir.join("outputs.json"), &outcome.outputs)?;
    write_json(&dir.join("done.json"), outcome)
}

pub(super) fn write_failure(out_dir: &Path, index: usize, node: NodeKind, message: &str) -> Result<(), OptimizeError> {
    let dir = out_dir.join(node_dir_name(index, node));
    create_dir(&dir)?;
    let _ = fs::remove_file(dir.join("done.json"));
    write_text(&dir.join("error.txt"), &format!("{message}\n"))
}

/// A stored node outcome, if it is complete, matches `fingerprint` and its
/// outputs still hash to the recorded checksum.
pub(super) fn load_node(dir: &Path, fingerprint: &str) -> Option<NodeOutcome> {
    let done: NodeOutcome = serde_json::from_str(&fs::read_to_string(dir.join("done.json")).ok()?).ok()?;
    if done.fingerprint != fingerprint {
        return None;
    }
    let outputs: Vec<QueryState> = serde_json::from_str(&fs::read_to_string(dir.join("outputs.json")).ok()?).ok()?;
    if checksum(&outputs) != done.output_checksum {
        log::warn!("{}: stored outputs do not match their checksum; re-running", dir.display());
        return None;
    }
    Some(NodeOutcome { outputs, ..done })
}

#[derive(Serialize)]
struct CandidateTiming<'a> {
    label: &'a str,
    mean_elapsed_seconds: f64,
}

#[derive(Serialize)]
struct NodeTiming<'a> {
    node: NodeKind,
    candidates: Vec<CandidateTiming<'a>>,
}

#[derive(Serialize)]
struct Timing<'a> {
    wall_seconds: f64,
    nodes: Vec<NodeTiming<'a>>,
}

pub(super) fn write_timing(out_dir: &Path, outcomes: &[NodeOutcome], wall_seconds: f64) -> Result<(), OptimizeError> {
    let timing = Timing {
        wall_seconds,
        nodes: outcomes
            .iter()
            .map(|o| NodeTiming {
                node: o.node,
                candidates: o
                    .records
                    .iter()
                    .map(|r| CandidateTiming {
                        label: &r.label,
                        mean_elapsed_seconds: r.mean_elapsed_seconds,
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json(&out_dir.join("timing.json"), &timing)
}

/// One `NN_<node>.csv` table from a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTable {
    pub name: String,
    pub path: PathBuf,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl NodeTable {
    pub fn selected_row(&self) -> Option<usize> {
        let col = self.header.iter().position(|h| h == "selected")?;
        self.rows.iter().position(|r| r.get(col).map(String::as_str) == Some("true"))
    }
}

/// Reads every node table in `run_dir`, in node order.
pub fn read_node_tables(run_dir: &Path) -> Result<Vec<NodeTable>, OptimizeError> {
    let entries = fs::read_dir(run_dir).map_err(|e| io_err(run_dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.len() > 3 && s.as_bytes()[..2].iter().all(u8::is_ascii_digit) && &s[2..3] == "_")
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(io_err(run_dir, "no node tables found"));
    }
    paths
        .into_iter()
        .map(|path| {
            let mut r = csv::Reader::from_path(&path).map_err(|e| io_err(&path, e))?;
            let header = r.headers().map_err(|e| io_err(&path, e))?.iter().map(String::from).collect();
            let rows = r
                .records()
                .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()))
                .collect::<Result<Vec<Vec<String>>, _>>()
                .map_err(|e| io_err(&path, e))?;
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            Ok(NodeTable { name, path, header, rows })
        })
        .collect()
}
