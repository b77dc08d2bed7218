//! Line-delimited record/replay store for completions.
//!
//! Each line is one JSON object `{key_hex, prompt_kind, response_text}`.
//! Keys are [`CacheKey`]s, so a replayed request must match the recorded
//! prompt kind, prompt text and parameters exactly.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{BackendError, CacheKey, CompletionBackend, CompletionRequest, PromptKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreEntry {
    pub key_hex: String,
    pub prompt_kind: PromptKind,
    pub response_text: String,
}

/// Reads every entry of a store file. Blank lines are ignored.
pub fn read_store(path: &Path) -> Result<Vec<StoreEntry>, BackendError> {
    let file = File::open(path)?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: StoreEntry = serde_json::from_str(&line).map_err(|e| BackendError::CorruptStore {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        entries.push(entry);
    }
    Ok(entries)
}

/// Serves stored completions byte-for-byte.
///
/// In strict mode a miss is an error naming the key. Otherwise a miss falls
/// through to the fallback transport when one is configured.
pub struct ReplayBackend {
    responses: HashMap<String, String>,
    strict: bool,
    fallback: Option<Arc<dyn CompletionBackend>>,
}

impl ReplayBackend {
    pub fn open(path: &Path) -> Result<Self, BackendError> {
        Ok(Self::from_entries(read_store(path)?))
    }

    pub fn from_entries(entries: impl IntoIterator<Item = StoreEntry>) -> Self {
        Self {
            responses: entries.into_iter().map(|e| (e.key_hex, e.response_text)).collect(),
            strict: true,
            fallback: None,
        }
    }

    pub fn lenient(mut self, fallback: Arc<dyn CompletionBackend>) -> Self {
        self.strict = false;
        self.fallback = Some(fallback);
        self
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl CompletionBackend for ReplayBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let key = CacheKey::of(req);
        if let Some(text) = self.responses.get(key.as_hex()) {
            return Ok(text.clone());
        }
        match (&self.fallback, self.strict) {
            (Some(inner), false) => inner.complete(req),
            _ => Err(BackendError::ReplayMiss {
                key: key.as_hex().to_string(),
            }),
        }
    }
}

/// Forwards misses to an inner transport and appends each new response to
/// the store. Entries already in the store are served without a call.
pub struct RecordingBackend {
    inner: Arc<dyn CompletionBackend>,
    path: PathBuf,
    state: Mutex<RecorderState>,
}

struct RecorderState {
    file: File,
    known: HashMap<String, String>,
    written: HashSet<String>,
}

impl RecordingBackend {
    /// Opens (creating if needed) the store at `path`.
    pub fn create(path: &Path, inner: Arc<dyn CompletionBackend>) -> Result<Self, BackendError> {
        let known = if path.exists() {
            read_store(path)?
                .into_iter()
                .map(|e| (e.key_hex, e.response_text))
                .collect()
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            path: path.to_path_buf(),
            state: Mutex::new(RecorderState {
                file,
                known,
                written: HashSet::new(),
            }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl CompletionBackend for RecordingBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let key = CacheKey::of(req);
        if let Some(text) = self.state.lock().unwrap().known.get(key.as_hex()) {
            return Ok(text.clone());
        }
        let text = self.inner.complete(req)?;
        let mut state = self.state.lock().unwrap();
        if state.written.insert(key.as_hex().to_string()) && !state.known.contains_key(key.as_hex()) {
            let entry = StoreEntry {
                key_hex: key.as_hex().to_string(),
                prompt_kind: req.kind,
                response_text: text.clone(),
            };
            let mut line = serde_json::to_string(&entry).map_err(|e| BackendError::Io(e.to_string()))?;
            line.push('\n');
            state.file.write_all(line.as_bytes())?;
            state.file.flush()?;
            state.known.insert(entry.key_hex, text.clone());
        }
        Ok(text)
    }
}
