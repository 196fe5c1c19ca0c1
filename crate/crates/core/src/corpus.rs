//! Passages, chunking and the JSONL corpus / QA formats.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("invalid passage `{id}`: {message}")]
    InvalidPassage { id: String, message: String },
    #[error("invalid chunk parameters: {0}")]
    ChunkConfig(String),
    #[error("document `{0}` has no tokens")]
    EmptyDocument(String),
}

/// A chunk of a source document, linked to its neighbours.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub position: usize,
    pub text: String,
    pub prev_id: Option<String>,
    pub next_id: Option<String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qid: String,
    pub question: String,
    pub ground_truth_answer: String,
    #[serde(default)]
    pub gold_passage_ids: Vec<String>,
}

/// Splits text into token byte spans. Chunk text is the original slice from
/// the first token's start to the last token's end, so formatting inside a
/// chunk is preserved.
pub trait Tokenizer: Send + Sync {
    fn spans(&self, text: &str) -> Vec<Range<usize>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    out.push(s..i);
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push(s..text.len());
        }
        out
    }
}

/// Greedy longest-match subword tokenizer over a vocabulary file (one piece
/// per line). Used to approximate byte-pair token counts; characters not
/// covered by the vocabulary become single-character tokens.
#[derive(Debug, Clone)]
pub struct VocabTokenizer {
    vocab: HashSet<String>,
    max_piece_chars: usize,
}

impl VocabTokenizer {
    pub fn new(pieces: impl IntoIterator<Item = String>) -> Self {
        let vocab: HashSet<String> = pieces
            .into_iter()
            // GPT-2 style vocabularies mark a leading space with `Ġ`.
            .map(|p| p.trim_start_matches('Ġ').to_string())
            .filter(|p| !p.is_empty())
            .collect();
        let max_piece_chars = vocab.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        VocabTokenizer { vocab, max_piece_chars }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string())))
    }
}

impl Tokenizer for VocabTokenizer {
    fn spans(&self, text: &str) -> Vec<Range<usize>> {
        let mut out = Vec::new();
        for word in WhitespaceTokenizer.spans(text) {
            let w = &text[word.clone()];
            let bounds: Vec<usize> = w.char_indices().map(|(i, _)| i).chain([w.len()]).collect();
            let mut i = 0;
            while i + 1 < bounds.len() {
                let longest = (1..=self.max_piece_chars.min(bounds.len() - 1 - i))
                    .rev()
                    .find(|&n| self.vocab.contains(&w[bounds[i]..bounds[i + n]]))
                    .unwrap_or(1);
                out.push(word.start + bounds[i]..word.start + bounds[i + longest]);
                i += longest;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkConfig {
    pub chunk_size: usize,
    pub overlap: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        ChunkConfig {
            chunk_size: 512,
            overlap: 50,
        }
    }
}

impl ChunkConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.chunk_size == 0 {
            return Err(CorpusError::ChunkConfig("chunk_size must be positive".into()));
        }
        if self.overlap >= self.chunk_size {
            return Err(CorpusError::ChunkConfig(format!(
                "overlap ({}) must be smaller than chunk_size ({})",
                self.overlap, self.chunk_size
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.chunk_size - self.overlap
    }
}

pub fn passage_id(doc_id: &str, position: usize) -> String {
    format!("{doc_id}#{position}")
}

/// Sliding-window chunking. Windows start every `chunk_size - overlap`
/// tokens; the last window may be shorter. A window that would only repeat
/// the tail of its predecessor is not emitted.
pub fn chunk_document(
    doc_id: &str,
    text: &str,
    cfg: &ChunkConfig,
    tokenizer: &dyn Tokenizer,
) -> Result<Vec<Passage>, CorpusError> {
    cfg.validate()?;
    let spans = tokenizer.spans(text);
    if spans.is_empty() {
        return Err(CorpusError::EmptyDocument(doc_id.to_string()));
    }
    let mut starts = vec![0usize];
    while starts.last().unwrap() + cfg.chunk_size < spans.len() {
        let next = starts.last().unwrap() + cfg.stride();
        starts.push(next);
    }
    let n = starts.len();
    Ok(starts
        .iter()
        .enumerate()
        .map(|(position, &start)| {
            let end = (start + cfg.chunk_size).min(spans.len());
            let byte_range = spans[start].start..spans[end - 1].end;
            let mut metadata = BTreeMap::new();
            metadata.insert("token_start".to_string(), start.to_string());
            metadata.insert("token_count".to_string(), (end - start).to_string());
            Passage {
                passage_id: passage_id(doc_id, position),
                doc_id: doc_id.to_string(),
                position,
                text: text[byte_range].to_string(),
                prev_id: (position > 0).then(|| passage_id(doc_id, position - 1)),
                next_id: (position + 1 < n).then(|| passage_id(doc_id, position + 1)),
                metadata,
            }
        })
        .collect())
}

/// Immutable collection of passages keyed by id, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassageStore {
    passages: IndexMap<String, Passage>,
}

impl PassageStore {
    /// Checks ids are unique, texts non-empty, and that links between
    /// passages present in the store are symmetric with increasing positions.
    /// Links to ids outside the store are kept and reported as warnings.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let mut map = IndexMap::with_capacity(passages.len());
        for p in passages {
            if p.text.trim().is_empty() {
                return Err(CorpusError::InvalidPassage {
                    id: p.passage_id,
                    message: "text is empty".into(),
                });
            }
            if map.contains_key(&p.passage_id) {
                return Err(CorpusError::DuplicateId(p.passage_id));
            }
            map.insert(p.passage_id.clone(), p);
        }
        let store = PassageStore { passages: map };
        store.check_links()?;
        Ok(store)
    }

    fn check_links(&self) -> Result<(), CorpusError> {
        let invalid = |id: &str, message: String| CorpusError::InvalidPassage {
            id: id.to_string(),
            message,
        };
        for p in self.passages.values() {
            if let Some(next) = &p.next_id {
                match self.passages.get(next) {
                    Some(n) if n.prev_id.as_deref() != Some(&p.passage_id) => {
                        return Err(invalid(&p.passage_id, format!("next `{next}` does not link back")));
                    }
                    Some(n) if n.doc_id != p.doc_id || n.position <= p.position => {
                        return Err(invalid(
                            &p.passage_id,
                            format!("next `{next}` is not a later passage of the same document"),
                        ));
                    }
                    Some(_) => {}
                    None => log::warn!("passage `{}` links to missing next `{next}`", p.passage_id),
                }
            }
            if let Some(prev) = &p.prev_id {
                match self.passages.get(prev) {
                    Some(q) if q.next_id.as_deref() != Some(&p.passage_id) => {
                        return Err(invalid(&p.passage_id, format!("prev `{prev}` does not link forward")));
                    }
                    Some(_) => {}
                    None => log::warn!("passage `{}` links to missing prev `{prev}`", p.passage_id),
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.passages.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.passages.keys().map(String::as_str)
    }

    /// Passages of `doc_id` reached by following `next_id` from the first passage.
    pub fn document_chain(&self, doc_id: &str) -> Vec<&Passage> {
        let mut chain = Vec::new();
        let mut cur = self
            .passages
            .values()
            .find(|p| p.doc_id == doc_id && p.prev_id.as_ref().is_none_or(|id| !self.passages.contains_key(id)));
        while let Some(p) = cur {
            chain.push(p);
            cur = p.next_id.as_ref().and_then(|id| self.passages.get(id));
        }
        chain
    }

    pub fn save_jsonl(&self, path: impl AsRef<Path>) -> Result<(), CorpusError> {
        write_jsonl(path.as_ref(), self.passages.values())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for item in items {
        let line = serde_json::to_string(item).expect("records serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, CorpusError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, item));
    }
    Ok(out)
}

/// Result of chunking a directory or file of `.txt` / `.md` documents.
#[derive(Debug)]
pub struct Ingested {
    pub store: PassageStore,
    pub documents: usize,
    /// Files that could not be read or chunked.
    pub errors: Vec<CorpusError>,
}

fn document_files(input: &Path) -> Result<Vec<PathBuf>, CorpusError> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![input.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|x| x == "txt" || x == "md") {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Chunks every document under `input`. Document ids are file paths
/// relative to `input` without their extension. Empty documents are
/// skipped with a warning.
pub fn ingest(input: &Path, cfg: &ChunkConfig, tokenizer: &dyn Tokenizer) -> Result<Ingested, CorpusError> {
    cfg.validate()?;
    let files = document_files(input)?;
    let root = if input.is_file() { input.parent().unwrap_or(Path::new("")) } else { input };
    let mut passages = Vec::new();
    let mut errors = Vec::new();
    let mut documents = 0;
    for file in files {
        let rel = file.strip_prefix(root).unwrap_or(&file).with_extension("");
        let doc_id = rel.to_string_lossy().replace('\\', "/");
        let text = match std::fs::read_to_string(&file) {
            Ok(t) => t,
            Err(source) => {
                errors.push(CorpusError::Io { path: file, source });
                continue;
            }
        };
        match chunk_document(&doc_id, &text, cfg, tokenizer) {
            Ok(ps) => {
                documents += 1;
                passages.extend(ps);
            }
            Err(CorpusError::EmptyDocument(id)) => log::warn!("{}: document `{id}` is empty; skipped", file.display()),
            Err(e) => errors.push(e),
        }
    }
    Ok(Ingested {
        store: PassageStore::from_passages(passages)?,
        documents,
        errors,
    })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<PassageStore, CorpusError> {
    let path = path.as_ref();
    let records = read_jsonl::<Passage>(path)?;
    PassageStore::from_passages(records.into_iter().map(|(_, p)| p).collect())
}

pub fn load_qa(path: impl AsRef<Path>) -> Result<Vec<QaRecord>, CorpusError> {
    let path = path.as_ref();
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (line, qa) in read_jsonl::<QaRecord>(path)? {
        let bad = |message: &str| CorpusError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.to_string(),
        };
        if qa.question.trim().is_empty() {
            return Err(bad("question is empty"));
        }
        if qa.ground_truth_answer.trim().is_empty() {
            return Err(bad("ground_truth_answer is empty"));
        }
        if seen.insert(qa.qid.clone(), line).is_some() {
            return Err(CorpusError::DuplicateId(qa.qid));
        }
        out.push(qa);
    }
    Ok(out)
}

pub fn save_qa(path: impl AsRef<Path>, records: &[QaRecord]) -> Result<(), CorpusError> {
    write_jsonl(path.as_ref(), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn short_document_is_one_unlinked_passage() {
        let ps = chunk_document("d", &words(100), &ChunkConfig::default(), &WhitespaceTokenizer).unwrap();
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0].prev_id, None);
        assert_eq!(ps[0].next_id, None);
        assert_eq!(ps[0].text, words(100));
    }

    #[test]
    fn thousand_tokens_give_three_windows() {
        // Stride 462: offsets 0, 462, 924; 924 + 512 >= 1000 stops the walk.
        let oracle: Vec<usize> = (0..).map(|k| k * 462).take_while(|&s| s == 0 || s - 462 + 512 < 1000).collect();
        assert_eq!(oracle, vec![0, 462, 924]);
        let ps = chunk_document("d", &words(1000), &ChunkConfig::default(), &WhitespaceTokenizer).unwrap();
        let starts: Vec<usize> = ps.iter().map(|p| p.metadata["token_start"].parse().unwrap()).collect();
        assert_eq!(starts, oracle);
        assert!(ps[2].text.starts_with("w924 "));
        assert!(ps[2].text.ends_with("w999"));
        assert_eq!(ps[2].metadata["token_count"], "76");
        assert_eq!(ps[0].next_id.as_deref(), Some("d#1"));
        assert_eq!(ps[1].prev_id.as_deref(), Some("d#0"));
    }

    #[test]
    fn overlap_must_be_below_chunk_size() {
        let cfg = ChunkConfig {
            chunk_size: 512,
            overlap: 512,
        };
        assert!(matches!(
            chunk_document("d", "a b", &cfg, &WhitespaceTokenizer),
            Err(CorpusError::ChunkConfig(_))
        ));
    }

    #[test]
    fn blank_document_is_rejected() {
        assert!(matches!(
            chunk_document("d", " \n\t", &ChunkConfig::default(), &WhitespaceTokenizer),
            Err(CorpusError::EmptyDocument(_))
        ));
    }

    #[test]
    fn chunk_text_preserves_inner_formatting() {
        let cfg = ChunkConfig {
            chunk_size: 2,
            overlap: 0,
        };
        let ps = chunk_document("d", "a\n\nb  c", &cfg, &WhitespaceTokenizer).unwrap();
        assert_eq!(ps[0].text, "a\n\nb");
        assert_eq!(ps[1].text, "c");
    }

    #[test]
    fn vocab_tokenizer_splits_into_longest_pieces() {
        let tok = VocabTokenizer::new(["Ġtoken", "iz", "ation", "token"].map(String::from));
        let text = "tokenization x";
        let pieces: Vec<&str> = tok.spans(text).into_iter().map(|r| &text[r]).collect();
        assert_eq!(pieces, vec!["token", "iz", "ation", "x"]);
    }

    #[test]
    fn duplicate_passage_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let p = r#"{"passage_id":"p1","doc_id":"d","position":0,"text":"x","prev_id":null,"next_id":null,"metadata":{}}"#;
        std::fs::write(&path, format!("{p}\n{p}\n")).unwrap();
        let err = load_corpus(&path).unwrap_err();
        assert!(matches!(&err, CorpusError::DuplicateId(id) if id == "p1"));
        assert!(err.to_string().contains("p1"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        std::fs::write(
            &path,
            "{\"qid\":\"q1\",\"question\":\"a?\",\"ground_truth_answer\":\"b\"}\nnot json\n",
        )
        .unwrap();
        match load_qa(&path).unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_files_load_as_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_corpus(&path).unwrap().is_empty());
        assert!(load_qa(&path).unwrap().is_empty());
    }

    #[test]
    fn duplicate_qid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("qa.jsonl");
        let q = QaRecord {
            qid: "q".into(),
            question: "a?".into(),
            ground_truth_answer: "b".into(),
            gold_passage_ids: vec![],
        };
        save_qa(&path, &[q.clone(), q]).unwrap();
        assert!(matches!(load_qa(&path), Err(CorpusError::DuplicateId(id)) if id == "q"));
    }

    #[test]
    fn asymmetric_links_are_rejected() {
        let mut ps = chunk_document(
            "d",
            &words(10),
            &ChunkConfig {
                chunk_size: 4,
                overlap: 1,
            },
            &WhitespaceTokenizer,
        )
        .unwrap();
        ps[1].prev_id = None;
        assert!(matches!(
            PassageStore::from_passages(ps),
            Err(CorpusError::InvalidPassage { .. })
        ));
    }

    #[test]
    fn store_round_trips_through_jsonl() {
        let cfg = ChunkConfig {
            chunk_size: 5,
            overlap: 2,
        };
        let mut ps = chunk_document("a", &words(23), &cfg, &WhitespaceTokenizer).unwrap();
        ps.extend(chunk_document("b", &words(7), &cfg, &WhitespaceTokenizer).unwrap());
        let store = PassageStore::from_passages(ps).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        store.save_jsonl(&path).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), store);
    }

    proptest! {
        #[test]
        fn chain_visits_every_passage_in_order(n in 1usize..300, size in 1usize..40, overlap_frac in 0.0f64..1.0) {
            let overlap = ((size as f64) * overlap_frac) as usize % size;
            let cfg = ChunkConfig { chunk_size: size, overlap };
            let text = words(n);
            let ps = chunk_document("d", &text, &cfg, &WhitespaceTokenizer).unwrap();
            prop_assert_eq!(&ps, &chunk_document("d", &text, &cfg, &WhitespaceTokenizer).unwrap());
            let store = PassageStore::from_passages(ps.clone()).unwrap();
            let chain = store.document_chain("d");
            prop_assert_eq!(chain.len(), ps.len());
            for (i, p) in chain.iter().enumerate() {
                prop_assert_eq!(p.position, i);
                let start: usize = p.metadata["token_start"].parse().unwrap();
                prop_assert_eq!(start, i * cfg.stride());
                prop_assert!(p.metadata["token_count"].parse::<usize>().unwrap() <= size);
            }
            // Every token is covered and the last chunk reaches the end.
            let last = chain.last().unwrap();
            let end: usize = last.metadata["token_start"].parse::<usize>().unwrap()
                + last.metadata["token_count"].parse::<usize>().unwrap();
            prop_assert_eq!(end, n);
        }
    }
}
