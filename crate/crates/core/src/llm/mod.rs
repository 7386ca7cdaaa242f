//! Chat-completion client with per-token log-probabilities.
//!
//! Requests are greedy (temperature 0, top-1 logprobs). Every response is
//! written to a content-addressed [`ResponseCache`] keyed by the SHA-256 of
//! the canonical request, so any run can be replayed without a backend.

mod cache;
mod mock;
mod openai;

use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompts::{PromptBundle, PromptMode};

pub use cache::{ResponseCache, RunRecord};
pub use mock::{mock_tokenize, FnMock, MockFixture, MockReply, MockRule, ScriptedMock};
pub use openai::OpenAiBackend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub logprobs: bool,
    pub top_logprobs: u32,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self::greedy(1024)
    }
}

impl DecodeParams {
    pub fn greedy(max_tokens: u32) -> Self {
        Self {
            temperature: 0.0,
            max_tokens,
            logprobs: true,
            top_logprobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub decode: DecodeParams,
}

impl GenerationRequest {
    /// Hex SHA-256 over the JSON serialization of `(model, messages, decode)`.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }
}

/// One generated token with its log-probability and byte span in the text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token_text: String,
    pub logprob: f64,
    pub char_span: (usize, usize),
}

impl TokenProb {
    pub fn prob(&self) -> f64 {
        self.logprob.exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub tokens: Vec<TokenProb>,
    pub model: String,
    #[serde(default)]
    pub cached: bool,
}

/// What a backend hands back before spans are attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    pub tokens: Vec<RawToken>,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawToken {
    pub text: String,
    pub logprob: f64,
    /// UTF-8 bytes of the token when the backend reports them; needed when a
    /// token splits a multi-byte character.
    pub bytes: Option<Vec<u8>>,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend lacks a required capability: {0}")]
    Capability(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("token/text alignment failed: {0}")]
    Alignment(String),
    #[error("no mock rule matched the request (last user turn starts with {0:?})")]
    NoMockRule(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<LlmError> },
    #[error("multi-hop thread aborted at hop {hop}: {source}")]
    ThreadAborted {
        hop: usize,
        transcript: Vec<Message>,
        #[source]
        source: Box<LlmError>,
    },
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            LlmError::Transport(_) => true,
            LlmError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &GenerationRequest) -> Result<RawCompletion, LlmError>;
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Runs `op` until it succeeds, fails fatally, or attempts run out.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.max_attempts => {
                    let delay = self
                        .base_delay
                        .saturating_mul(1 << (attempt - 1).min(16))
                        .min(self.max_delay);
                    log::warn!("attempt {attempt} failed ({e}); retrying in {delay:?}");
                    thread::sleep(delay);
                }
                Err(e) if e.is_retryable() => {
                    return Err(LlmError::Exhausted {
                        attempts: attempt,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    /// Enforces greedy decoding with logprobs on every request.
    pub experiment_mode: bool,
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            experiment_mode: true,
            retry: RetryPolicy::default(),
        }
    }
}

/// Shareable client: backend + cache + retry policy.
pub struct LlmClient {
    backend: Arc<dyn Backend>,
    cache: Arc<ResponseCache>,
    config: ClientConfig,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn Backend>, cache: Arc<ResponseCache>, config: ClientConfig) -> Self {
        Self {
            backend,
            cache,
            config,
        }
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn validate(&self, req: &GenerationRequest) -> Result<(), LlmError> {
        if req.messages.is_empty() {
            return Err(LlmError::InvalidRequest("no messages".into()));
        }
        if self.config.experiment_mode {
            if req.decode.temperature != 0.0 {
                return Err(LlmError::InvalidRequest(format!(
                    "experiments require greedy decoding (temperature 0), got {}",
                    req.decode.temperature
                )));
            }
            if !req.decode.logprobs {
                return Err(LlmError::InvalidRequest("experiments require logprobs".into()));
            }
        }
        Ok(())
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, LlmError> {
        self.validate(req)?;
        let hash = req.hash();
        if let Some(mut hit) = self.cache.get(&hash) {
            hit.cached = true;
            return Ok(hit);
        }
        let raw = self.config.retry.run(|| self.backend.complete(req))?;
        let response = attach_spans(raw)?;
        self.cache.insert(RunRecord::new(hash, req.clone(), response.clone()))?;
        Ok(response)
    }
}

/// Computes each token's byte span and checks the tokens tile the text.
pub fn attach_spans(raw: RawCompletion) -> Result<GenerationResponse, LlmError> {
    let mut tokens = Vec::with_capacity(raw.tokens.len());
    let mut pos = 0;
    for t in &raw.tokens {
        let len = t.bytes.as_ref().map_or(t.text.len(), Vec::len);
        if !(t.logprob <= 0.0) {
            return Err(LlmError::Alignment(format!(
                "token {:?} has logprob {} > 0",
                t.text, t.logprob
            )));
        }
        tokens.push(TokenProb {
            token_text: t.text.clone(),
            logprob: t.logprob,
            char_span: (pos, pos + len),
        });
        pos += len;
    }
    if pos != raw.text.len() {
        return Err(LlmError::Alignment(format!(
            "tokens cover {pos} bytes but text has {}",
            raw.text.len()
        )));
    }
    // token_text may contain replacement characters for split code points;
    // rewrite it from the authoritative text where the span is on a boundary.
    for t in &mut tokens {
        if let Some(s) = raw.text.get(t.char_span.0..t.char_span.1) {
            t.token_text = s.to_string();
        }
    }
    Ok(GenerationResponse {
        text: raw.text,
        tokens,
        model: raw.model,
        cached: false,
    })
}

/// Builds the message list for a single-turn bundle.
pub fn single_turn_messages(bundle: &PromptBundle) -> Vec<Message> {
    vec![
        Message::new(Role::System, bundle.system.clone()),
        Message::new(Role::User, bundle.user_turns[0].clone()),
    ]
}

/// Runs the four hops of a multi-hop bundle, feeding every assistant answer
/// back into the history before the next user turn.
pub fn run_multihop_thread(
    client: &LlmClient,
    bundle: &PromptBundle,
    model: &str,
    decode: &DecodeParams,
) -> Result<Vec<GenerationResponse>, LlmError> {
    if bundle.mode != PromptMode::Multihop {
        return Err(LlmError::InvalidRequest("bundle is not multi-hop".into()));
    }
    let mut messages = vec![Message::new(Role::System, bundle.system.clone())];
    let mut responses = Vec::with_capacity(bundle.user_turns.len());
    for (hop, turn) in bundle.user_turns.iter().enumerate() {
        messages.push(Message::new(Role::User, turn.clone()));
        let req = GenerationRequest {
            model: model.to_string(),
            messages: messages.clone(),
            decode: decode.clone(),
        };
        match client.generate(&req) {
            Ok(resp) => {
                messages.push(Message::new(Role::Assistant, resp.text.clone()));
                responses.push(resp);
            }
            Err(e) => {
                return Err(LlmError::ThreadAborted {
                    hop: hop + 1,
                    transcript: messages,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(responses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{all_element_orders, CategorySchema};
    use crate::prompts::build_multihop;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn client_with(backend: Arc<dyn Backend>, retry: RetryPolicy) -> LlmClient {
        LlmClient::new(
            backend,
            Arc::new(ResponseCache::in_memory()),
            ClientConfig {
                experiment_mode: true,
                retry,
            },
        )
    }

    fn req(text: &str) -> GenerationRequest {
        GenerationRequest {
            model: "mock".into(),
            messages: vec![Message::new(Role::User, text)],
            decode: DecodeParams::default(),
        }
    }

    #[test]
    fn second_call_is_cached() {
        let mock = Arc::new(ScriptedMock::fixed(MockReply::uniform("[('food', 'positive')]", 0.5f64.ln())));
        let client = client_with(mock.clone(), RetryPolicy::none());
        let a = client.generate(&req("hi")).unwrap();
        let b = client.generate(&req("hi")).unwrap();
        assert!(!a.cached);
        assert!(b.cached);
        assert_eq!(a.text, b.text);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn uniform_mock_logprobs() {
        let mock = Arc::new(ScriptedMock::fixed(MockReply::uniform("[('food', 'positive')]", 0.5f64.ln())));
        let client = client_with(mock, RetryPolicy::none());
        let r = client.generate(&req("x")).unwrap();
        assert!(r.tokens.iter().all(|t| (t.logprob - 0.5f64.ln()).abs() < 1e-15));
        let joined: String = r.tokens.iter().map(|t| t.token_text.as_str()).collect();
        assert_eq!(joined, r.text);
    }

    #[test]
    fn non_greedy_rejected() {
        let mock = Arc::new(ScriptedMock::fixed(MockReply::uniform("x", 0.0)));
        let client = client_with(mock, RetryPolicy::none());
        let mut r = req("x");
        r.decode.temperature = 0.7;
        assert!(matches!(client.generate(&r), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn request_hash_is_stable_hex() {
        let h = req("abc").hash();
        assert_eq!(h.len(), 64);
        assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(h, req("abc").hash());
        assert_ne!(h, req("abd").hash());
    }

    #[test]
    fn transport_errors_retry_then_succeed() {
        let n = Arc::new(AtomicUsize::new(0));
        let n2 = n.clone();
        let flaky = FnMock::new(move |_req| {
            if n2.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(LlmError::Transport("connection refused".into()))
            } else {
                Ok(MockReply::uniform("ok", 0.0))
            }
        });
        let retry = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        };
        let client = client_with(Arc::new(flaky), retry);
        assert_eq!(client.generate(&req("x")).unwrap().text, "ok");
        assert_eq!(n.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_are_bounded_and_4xx_is_fatal() {
        let n = Arc::new(AtomicUsize::new(0));
        let n2 = n.clone();
        let down = FnMock::new(move |_| {
            n2.fetch_add(1, Ordering::SeqCst);
            Err(LlmError::Transport("down".into()))
        });
        let retry = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        };
        let client = client_with(Arc::new(down), retry.clone());
        assert!(matches!(client.generate(&req("x")), Err(LlmError::Exhausted { attempts: 5, .. })));
        assert_eq!(n.load(Ordering::SeqCst), 5);

        let bad = FnMock::new(|_| Err(LlmError::Http { status: 400, body: "bad model".into() }));
        let client = client_with(Arc::new(bad), retry);
        assert!(matches!(client.generate(&req("x")), Err(LlmError::Http { status: 400, .. })));
    }

    #[test]
    fn spans_must_tile_text() {
        let raw = RawCompletion {
            text: "abc".into(),
            tokens: vec![RawToken { text: "ab".into(), logprob: -0.1, bytes: None }],
            model: "m".into(),
        };
        assert!(matches!(attach_spans(raw), Err(LlmError::Alignment(_))));
        let raw = RawCompletion {
            text: "é".into(),
            tokens: vec![
                RawToken { text: "\u{fffd}".into(), logprob: -0.1, bytes: Some(vec![0xc3]) },
                RawToken { text: "\u{fffd}".into(), logprob: -0.1, bytes: Some(vec![0xa9]) },
            ],
            model: "m".into(),
        };
        let r = attach_spans(raw).unwrap();
        assert_eq!(r.tokens[1].char_span, (1, 2));
    }

    #[test]
    fn multihop_history_grows_and_echoes_answers() {
        let schema = CategorySchema::new("restaurant", ["menu", "food"]).unwrap();
        let bundle = build_multihop(all_element_orders()[1], "The chili was not even edible.", &schema, "restaurant").unwrap();
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let seen2 = seen.clone();
        let answers = ["bar, onion, rings, chili", "not, even, edible", "['menu', 'food']", "[('menu', 'negative'), ('food', 'negative')]"];
        let mock = FnMock::new(move |req: &GenerationRequest| {
            let mut s = seen2.lock().unwrap();
            s.push(req.messages.clone());
            Ok(MockReply::uniform(answers[s.len() - 1], -0.1))
        });
        let client = client_with(Arc::new(mock), RetryPolicy::none());
        let out = run_multihop_thread(&client, &bundle, "mock", &DecodeParams::default()).unwrap();
        assert_eq!(out.len(), 4);
        let seen = seen.lock().unwrap();
        let lens: Vec<usize> = seen.iter().map(Vec::len).collect();
        assert_eq!(lens, vec![2, 4, 6, 8]);
        assert_eq!(seen[1][2], Message::new(Role::Assistant, answers[0]));
        assert_eq!(crate::parse::extract_list(&out[3].text).unwrap().tuples.len(), 2);
    }

    #[test]
    fn multihop_failure_keeps_partial_transcript() {
        let schema = CategorySchema::new("restaurant", ["menu", "food"]).unwrap();
        let bundle = build_multihop(all_element_orders()[0], "text", &schema, "restaurant").unwrap();
        let n = Arc::new(AtomicUsize::new(0));
        let mock = FnMock::new(move |_| {
            if n.fetch_add(1, Ordering::SeqCst) == 2 {
                Err(LlmError::Capability("no logprobs".into()))
            } else {
                Ok(MockReply::uniform("ok", 0.0))
            }
        });
        let client = client_with(Arc::new(mock), RetryPolicy::none());
        match run_multihop_thread(&client, &bundle, "mock", &DecodeParams::default()) {
            Err(LlmError::ThreadAborted { hop, transcript, .. }) => {
                assert_eq!(hop, 3);
                assert_eq!(transcript.len(), 6);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
