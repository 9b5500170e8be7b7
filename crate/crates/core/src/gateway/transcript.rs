//! JSONL log of every backend exchange.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub ts: DateTime<Utc>,
    pub digest: String,
    pub latency_ms: f64,
    /// HTTP status code, or a label such as `"replay"` or `"timeout"`.
    pub status: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
}

/// In-memory transcript, optionally mirrored to an append-only file.
#[derive(Debug, Default)]
pub struct Transcript {
    path: Option<PathBuf>,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl Transcript {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        Self {
            path: Some(path.into()),
            entries: Mutex::default(),
        }
    }

    pub fn record(&self, entry: TranscriptEntry) {
        let mut entries = self.entries.lock().unwrap();
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&entry).expect("entry serializes");
            let written = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = written {
                tracing::warn!(path = %path.display(), error = %e, "failed to append transcript");
            }
        }
        entries.push(entry);
    }

    pub fn entries(&self) -> Vec<TranscriptEntry> {
        self.entries.lock().unwrap().clone()
    }
}
