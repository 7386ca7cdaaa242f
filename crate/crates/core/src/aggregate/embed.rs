//! Category embeddings for the clustered-pairs technique.

use std::time::Duration;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{LlmError, RetryPolicy};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding transport failed: {0}")]
    Transport(#[from] LlmError),
    #[error("embedding response malformed: {0}")]
    BadResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

pub trait Embedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

/// Deterministic offline embedder: signed feature hashing of case-folded
/// character trigrams (with `^`/`$` boundary markers) and whitespace words,
/// hashed with SHA-256 and L2-normalised. A string with no features maps to
/// the first basis vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, text: &str) -> Vec<f64> {
        let folded = text.to_lowercase();
        let chars: Vec<char> = std::iter::once('^')
            .chain(folded.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut features: Vec<String> = chars.windows(3).map(|w| w.iter().collect()).collect();
        features.extend(folded.split_whitespace().map(|w| format!("w:{w}")));
        let mut v = vec![0.0; self.dim];
        for f in features {
            let h = Sha256::digest(f.as_bytes());
            let idx = u64::from_le_bytes(h[..8].try_into().unwrap()) % self.dim as u64;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[idx as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(64)
    }
}

impl Embedder for HashEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Sentence-embedding provider behind an OpenAI-style `/embeddings` endpoint
/// (`{"model", "input": [..]}` → `{"data": [{"embedding": [..]}]}`).
pub struct HttpEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let endpoint = endpoint.trim_end_matches('/');
        let url = if endpoint.ends_with("/embeddings") {
            endpoint.to_string()
        } else {
            format!("{endpoint}/embeddings")
        };
        Self {
            url,
            model: model.into(),
            api_key,
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn call(&self, texts: &[String]) -> Result<Value, LlmError> {
        let mut req = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(json!({ "model": self.model, "input": texts })) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| LlmError::Transport(format!("bad JSON body: {e}"))),
            Err(ureq::Error::Status(status, resp)) => Err(LlmError::Http {
                status,
                body: resp.into_string().unwrap_or_default().chars().take(300).collect(),
            }),
            Err(ureq::Error::Transport(t)) => Err(LlmError::Transport(t.to_string())),
        }
    }
}

pub(crate) fn parse_embeddings(body: &Value, expected: usize) -> Result<Vec<Vec<f64>>, EmbedError> {
    let data = body
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| EmbedError::BadResponse("missing `data` array".into()))?;
    if data.len() != expected {
        return Err(EmbedError::BadResponse(format!("{} vectors for {expected} inputs", data.len())));
    }
    let mut out = Vec::with_capacity(data.len());
    for item in data {
        let v: Vec<f64> = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::BadResponse("item without `embedding`".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| EmbedError::BadResponse("non-numeric coordinate".into())))
            .collect::<Result<_, _>>()?;
        if let Some(first) = out.first().map(Vec::len) {
            if v.len() != first {
                return Err(EmbedError::DimensionMismatch {
                    expected: first,
                    got: v.len(),
                });
            }
        }
        out.push(v);
    }
    Ok(out)
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = self.retry.run(|| self.call(texts))?;
        parse_embeddings(&body, texts.len())
    }
}
