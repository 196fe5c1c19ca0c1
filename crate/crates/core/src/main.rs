use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ragsweep::corpus::{ingest, ChunkConfig, Tokenizer, VocabTokenizer, WhitespaceTokenizer};
use ragsweep::optimizer::{optimize, read_node_tables, NodeTable, RunOptions};
use ragsweep::pipeline::Pipeline;

#[derive(Parser)]
#[command(name = "ragsweep", version, about = "Search for the best RAG pipeline one node at a time")]
struct Cli {
    /// Replace every model endpoint with the deterministic offline mock.
    #[arg(long, global = true)]
    mock_llm: bool,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Chunk .txt/.md documents into a passage corpus (JSONL).
    Ingest {
        /// A document file or a directory searched recursively.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ChunkConfig::default().chunk_size)]
        chunk_size: usize,
        #[arg(long, default_value_t = ChunkConfig::default().overlap)]
        overlap: usize,
        /// Subword vocabulary, one piece per line. Whitespace tokens otherwise.
        #[arg(long)]
        vocab: Option<PathBuf>,
    },
    /// Run the node-by-node sweep and write its artifacts.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        qa: Option<PathBuf>,
        #[arg(long, default_value = "runs/latest")]
        out_dir: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
        /// Shuffle the order used to break exact ties.
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse nodes already completed in --out-dir with the same inputs.
        #[arg(long)]
        resume: bool,
    },
    /// Print the per-node tables of a run, winner starred.
    Report { run_dir: PathBuf },
    /// Answer one question with an exported pipeline.
    Query {
        #[arg(long)]
        pipeline: PathBuf,
        question: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let code = match cli.command {
        Command::Ingest {
            input,
            out,
            chunk_size,
            overlap,
            vocab,
        } => cmd_ingest(&input, &out, ChunkConfig { chunk_size, overlap }, vocab.as_deref()),
        Command::Optimize {
            config,
            corpus,
            qa,
            out_dir,
            workers,
            seed,
            resume,
        } => cmd_optimize(RunOptions {
            config,
            corpus,
            qa,
            out_dir,
            mock_llm: cli.mock_llm,
            workers,
            seed,
            resume,
        }),
        Command::Report { run_dir } => cmd_report(&run_dir),
        Command::Query { pipeline, question } => cmd_query(&pipeline, &question, cli.mock_llm),
    };
    ExitCode::from(code)
}

fn cmd_ingest(input: &Path, out: &Path, cfg: ChunkConfig, vocab: Option<&Path>) -> u8 {
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return 2;
    }
    let tokenizer: Box<dyn Tokenizer> = match vocab {
        Some(path) => match VocabTokenizer::from_file(path) {
            Ok(t) => Box::new(t),
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        },
        None => Box::new(WhitespaceTokenizer),
    };
    let ingested = match ingest(input, &cfg, tokenizer.as_ref()) {
        Ok(i) => i,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    for e in &ingested.errors {
        eprintln!("error: {e}");
    }
    if ingested.store.is_empty() && ingested.errors.is_empty() {
        log::warn!("no documents found under {}", input.display());
    }
    if let Err(e) = ingested.store.save_jsonl(out) {
        eprintln!("error: {e}");
        return 1;
    }
    println!(
        "wrote {} passages from {} documents to {}",
        ingested.store.len(),
        ingested.documents,
        out.display()
    );
    if ingested.errors.is_empty() {
        0
    } else {
        1
    }
}

fn cmd_optimize(opts: RunOptions) -> u8 {
    match optimize(&opts) {
        Ok(summary) => {
            for n in &summary.nodes {
                let value = n.selection_value.map(|v| format!("{v:.4}")).unwrap_or_default();
                println!("{:<18} {:<48} {value}", n.node.as_str(), n.winner);
            }
            println!(
                "{} module evaluations; artifacts in {}",
                summary.module_evaluations,
                opts.out_dir.display()
            );
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as u8
        }
    }
}

fn render_table(t: &NodeTable) -> String {
    let keep: Vec<usize> = (0..t.header.len())
        .filter(|&i| t.header[i] != "params" && t.header[i] != "selected")
        .collect();
    let selected = t.selected_row();
    let mut widths: Vec<usize> = keep.iter().map(|&i| t.header[i].len()).collect();
    for row in &t.rows {
        for (w, &i) in widths.iter_mut().zip(&keep) {
            *w = (*w).max(row.get(i).map_or(0, |c| c.len()));
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = format!("{}\n", t.name);
    out += &format!("  {}\n", line(keep.iter().map(|&i| t.header[i].as_str()).collect()));
    for (r, row) in t.rows.iter().enumerate() {
        let mark = if Some(r) == selected { '*' } else { ' ' };
        let cells = keep.iter().map(|&i| row.get(i).map_or("", String::as_str)).collect();
        out += &format!("{mark} {}\n", line(cells));
    }
    out
}

fn cmd_report(run_dir: &Path) -> u8 {
    match read_node_tables(run_dir) {
        Ok(tables) => {
            let text: Vec<String> = tables.iter().map(render_table).collect();
            print!("{}", text.join("\n"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn cmd_query(pipeline: &Path, question: &str, mock: bool) -> u8 {
    let result = Pipeline::load(pipeline, mock).and_then(|p| p.answer(question));
    match result {
        Ok(a) => {
            if a.empty_context {
                log::warn!("retrieval returned no passages; answered without context");
            }
            println!("{}", a.answer);
            println!("passages: {}", a.passage_ids.join(", "));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
