use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{GenerationRequest, GenerationResponse, LlmError};

/// One replayable LLM call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub request_hash: String,
    pub request: GenerationRequest,
    pub response: GenerationResponse,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunRecord {
    pub fn new(request_hash: String, request: GenerationRequest, mut response: GenerationResponse) -> Self {
        response.cached = false;
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            request_hash,
            request,
            response,
            timestamp,
        }
    }
}

/// Append-only JSONL cache with an in-memory index.
pub struct ResponseCache {
    path: Option<PathBuf>,
    index: Mutex<HashMap<String, GenerationResponse>>,
    writer: Mutex<Option<File>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            index: Mutex::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Loads an existing cache file (if any) and opens it for appending.
    ///
    /// A truncated final line, as left by an interrupted run, is ignored.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref().to_path_buf();
        let mut index = HashMap::new();
        if path.exists() {
            let file = File::open(&path).map_err(|e| cache_err(&path, e))?;
            let lines: Vec<String> = BufReader::new(file)
                .lines()
                .collect::<Result<_, _>>()
                .map_err(|e| cache_err(&path, e))?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<RunRecord>(line) {
                    Ok(rec) => {
                        index.entry(rec.request_hash).or_insert(rec.response);
                    }
                    Err(e) if i + 1 == last => {
                        log::warn!("{}: ignoring truncated last line: {e}", path.display());
                    }
                    Err(e) => {
                        return Err(LlmError::Cache(format!("{}:{}: {e}", path.display(), i + 1)));
                    }
                }
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| cache_err(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| cache_err(&path, e))?;
        Ok(Self {
            path: Some(path),
            index: Mutex::new(index),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, hash: &str) -> Option<GenerationResponse> {
        self.index.lock().unwrap().get(hash).cloned()
    }

    /// Stores a record; a hash that is already present is not written twice.
    pub fn insert(&self, record: RunRecord) -> Result<(), LlmError> {
        let mut index = self.index.lock().unwrap();
        if index.contains_key(&record.request_hash) {
            return Ok(());
        }
        let mut writer = self.writer.lock().unwrap();
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&record).map_err(|e| LlmError::Cache(e.to_string()))?;
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|_| file.flush())
                .map_err(|e| LlmError::Cache(e.to_string()))?;
        }
        index.insert(record.request_hash, record.response);
        Ok(())
    }
}

fn cache_err(path: &Path, e: std::io::Error) -> LlmError {
    LlmError::Cache(format!("{}: {e}", path.display()))
}
