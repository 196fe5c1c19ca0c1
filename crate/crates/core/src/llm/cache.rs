use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LlmConfig;

/// Identity of one model request. Two requests with equal keys must yield
/// byte-identical responses from the cache.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

#[derive(Serialize)]
struct KeyMaterial<'a> {
    kind: &'a str,
    model_name: &'a str,
    temperature: f64,
    max_tokens: Option<u32>,
    input: &'a str,
}

impl CacheKey {
    pub fn new(kind: &str, cfg: &LlmConfig, input: &str) -> Self {
        let material = KeyMaterial {
            kind,
            model_name: &cfg.model_name,
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
            input,
        };
        let bytes = serde_json::to_vec(&material).expect("key material serializes");
        CacheKey(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    value: serde_json::Value,
}

/// Content-addressed response store. When backed by a file, every new entry
/// is appended as one JSON line; on open, later lines win.
#[derive(Debug)]
pub struct ResponseCache {
    entries: Mutex<HashMap<String, serde_json::Value>>,
    file: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            entries: Mutex::new(HashMap::new()),
            file: None,
            path: None,
        }
    }

    pub fn open(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(&line) {
                    Ok(entry) => {
                        entries.insert(entry.key, entry.value);
                    }
                    // A torn final write from an interrupted run is expected.
                    Err(e) => log::warn!(
                        "{}:{}: skipping unreadable cache entry: {e}",
                        path.display(),
                        lineno + 1
                    ),
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResponseCache {
            entries: Mutex::new(entries),
            file: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<serde_json::Value> {
        self.entries.lock().expect("cache poisoned").get(key.as_str()).cloned()
    }

    pub fn put(&self, key: &CacheKey, value: serde_json::Value) -> std::io::Result<()> {
        let mut entries = self.entries.lock().expect("cache poisoned");
        if entries.contains_key(key.as_str()) {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let line = serde_json::to_string(&CacheLine {
                key: key.as_str().to_string(),
                value: value.clone(),
            })
            .expect("cache line serializes");
            let mut f = file.lock().expect("cache file poisoned");
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        entries.insert(key.as_str().to_string(), value);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_depends_on_every_component() {
        let base = LlmConfig::new("m");
        let k = CacheKey::new("chat", &base, "x");
        assert_eq!(k, CacheKey::new("chat", &base, "x"));
        assert_ne!(k, CacheKey::new("embed", &base, "x"));
        assert_ne!(k, CacheKey::new("chat", &LlmConfig::new("m2"), "x"));
        assert_ne!(k, CacheKey::new("chat", &base.clone().with_temperature(1.0), "x"));
        assert_ne!(k, CacheKey::new("chat", &base.clone().with_max_tokens(4), "x"));
        assert_ne!(k, CacheKey::new("chat", &base, "x "));
    }

    #[test]
    fn persisted_entries_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let key = CacheKey::new("chat", &LlmConfig::new("m"), "hello");
        {
            let cache = ResponseCache::open(&path).unwrap();
            cache.put(&key, serde_json::json!("world")).unwrap();
            cache.put(&key, serde_json::json!("ignored")).unwrap();
        }
        let reopened = ResponseCache::open(&path).unwrap();
        assert_eq!(reopened.get(&key), Some(serde_json::json!("world")));
        assert_eq!(reopened.len(), 1);
        let lines = std::fs::read_to_string(&path).unwrap();
        assert_eq!(lines.lines().count(), 1);
    }

    #[test]
    fn torn_trailing_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        std::fs::write(&path, "{\"key\":\"a\",\"value\":1}\n{\"key\":\"b\",\"val").unwrap();
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
    }
}
