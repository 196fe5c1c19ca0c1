use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::RetrievalError;

pub const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_FORMAT: &str = "ragsweep-index";

#[derive(Serialize, Deserialize)]
struct Snapshot<T> {
    format: String,
    version: u32,
    kind: String,
    index: T,
}

fn snapshot_err(path: &Path, message: impl ToString) -> RetrievalError {
    RetrievalError::Snapshot {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Writes `index` as a single JSON file with a versioned header.
pub fn save_snapshot<T: Serialize>(path: &Path, kind: &str, index: &T) -> Result<(), RetrievalError> {
    let snapshot = Snapshot {
        format: SNAPSHOT_FORMAT.to_string(),
        version: SNAPSHOT_VERSION,
        kind: kind.to_string(),
        index,
    };
    let bytes = serde_json::to_vec(&snapshot).map_err(|e| snapshot_err(path, e))?;
    std::fs::write(path, bytes).map_err(|e| snapshot_err(path, e))
}

pub fn load_snapshot<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, RetrievalError> {
    let bytes = std::fs::read(path).map_err(|e| snapshot_err(path, e))?;
    let snapshot: Snapshot<T> = serde_json::from_slice(&bytes).map_err(|e| snapshot_err(path, e))?;
    if snapshot.format != SNAPSHOT_FORMAT {
        return Err(snapshot_err(path, format!("unknown format `{}`", snapshot.format)));
    }
    if snapshot.version != SNAPSHOT_VERSION {
        return Err(snapshot_err(
            path,
            format!("version {} (expected {SNAPSHOT_VERSION})", snapshot.version),
        ));
    }
    if snapshot.kind != kind {
        return Err(snapshot_err(path, format!("holds a `{}` index, expected `{kind}`", snapshot.kind)));
    }
    Ok(snapshot.index)
}
