//! Digest-keyed record/replay store for backend responses.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::fsutil::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordedResponse {
    pub text: String,
}

/// Request digest to recorded response. Serialized as a JSON object with
/// sorted keys.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Cassette {
    pub entries: BTreeMap<String, RecordedResponse>,
}

impl Cassette {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("cassette serializes");
        s.push('\n');
        s
    }
}

/// A cassette bound to a file. Entries are only ever added, and every
/// addition is persisted before the call returns.
#[derive(Debug)]
pub struct CassetteStore {
    path: PathBuf,
    inner: Mutex<Cassette>,
}

impl CassetteStore {
    /// Opens an existing cassette, or an empty one when `allow_missing` and
    /// the file does not exist yet.
    pub fn open(path: impl Into<PathBuf>, allow_missing: bool) -> Result<Self, String> {
        let path = path.into();
        let cassette = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map_err(|e| format!("cassette {}: {e}", path.display()))?,
            Err(e) if allow_missing && e.kind() == std::io::ErrorKind::NotFound => Cassette::default(),
            Err(e) => return Err(format!("cassette {}: {e}", path.display())),
        };
        Ok(Self {
            path,
            inner: Mutex::new(cassette),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, digest: &str) -> Option<RecordedResponse> {
        self.inner.lock().unwrap().entries.get(digest).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Cassette {
        self.inner.lock().unwrap().clone()
    }

    /// Adds an entry unless the digest is already present; returns the entry
    /// that ends up stored.
    pub fn insert(&self, digest: &str, response: RecordedResponse) -> std::io::Result<RecordedResponse> {
        let mut guard = self.inner.lock().unwrap();
        if let Some(existing) = guard.entries.get(digest) {
            return Ok(existing.clone());
        }
        guard.entries.insert(digest.to_string(), response.clone());
        write_atomic(&self.path, guard.to_json().as_bytes())?;
        Ok(response)
    }
}
