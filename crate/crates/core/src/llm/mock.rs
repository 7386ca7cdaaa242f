//! Deterministic offline backends.
//!
//! [`ScriptedMock`] answers from rules matched against the prompt (usually
//! loaded from a JSON fixture); [`FnMock`] wraps a closure for tests. Both
//! tokenize replies with [`mock_tokenize`] so token spans are fixed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use super::{Backend, GenerationRequest, LlmError, RawCompletion, RawToken, Role};
use crate::domain::ElementOrder;
use crate::prompts::detect_order;

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '#' | '/' | '&' | '-')
}

/// Splits text into tokens: optional leading whitespace followed by either a
/// maximal run of word characters or a single other character. Trailing
/// whitespace becomes its own token. Returns `(token, byte_span)`.
pub fn mock_tokenize(text: &str) -> Vec<(String, (usize, usize))> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(start, _)) = chars.peek() {
        while matches!(chars.peek(), Some((_, c)) if c.is_whitespace()) {
            chars.next();
        }
        match chars.peek().copied() {
            None => {}
            Some((_, c)) if is_word_char(c) => {
                while matches!(chars.peek(), Some((_, c)) if is_word_char(*c)) {
                    chars.next();
                }
            }
            Some(_) => {
                chars.next();
            }
        }
        let end = chars.peek().map_or(text.len(), |(i, _)| *i);
        out.push((text[start..end].to_string(), (start, end)));
    }
    out
}

/// A scripted answer.
///
/// Token log-probabilities resolve in order: `logprob_sequence` (by token
/// index), then `token_logprobs` (by whitespace-trimmed token text), then
/// the uniform `logprob`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockReply {
    pub text: String,
    #[serde(default)]
    pub logprob: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub token_logprobs: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob_sequence: Option<Vec<f64>>,
}

impl MockReply {
    pub fn uniform(text: impl Into<String>, logprob: f64) -> Self {
        Self {
            text: text.into(),
            logprob,
            ..Default::default()
        }
    }

    pub fn with_token(mut self, token: impl Into<String>, logprob: f64) -> Self {
        self.token_logprobs.insert(token.into(), logprob);
        self
    }

    fn into_completion(self, model: &str) -> RawCompletion {
        let tokens = mock_tokenize(&self.text)
            .into_iter()
            .enumerate()
            .map(|(i, (tok, _))| {
                let lp = self
                    .logprob_sequence
                    .as_ref()
                    .and_then(|seq| seq.get(i).copied())
                    .or_else(|| self.token_logprobs.get(tok.trim()).copied())
                    .unwrap_or(self.logprob);
                RawToken {
                    text: tok,
                    logprob: lp,
                    bytes: None,
                }
            })
            .collect();
        RawCompletion {
            text: self.text,
            tokens,
            model: model.to_string(),
        }
    }
}

/// Matches when every `contains` substring occurs in the last user turn,
/// every `context` substring occurs somewhere in the conversation and, if
/// `agent` is set, the first user turn is that agent's enumerated or
/// few-shot prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub context: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<ElementOrder>,
    pub reply: MockReply,
}

impl MockRule {
    fn matches(&self, req: &GenerationRequest) -> bool {
        let last = req.last_user().unwrap_or("");
        if let Some(agent) = self.agent {
            let first = req.messages.iter().find(|m| m.role == Role::User);
            if first.and_then(|m| detect_order(&m.content)) != Some(agent) {
                return false;
            }
        }
        self.contains.iter().all(|s| last.contains(s.as_str()))
            && self
                .context
                .iter()
                .all(|s| req.messages.iter().any(|m| m.content.contains(s.as_str())))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: Option<MockReply>,
}

impl MockFixture {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, LlmError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::InvalidRequest(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| LlmError::InvalidRequest(format!("{}: {e}", path.display())))
    }
}

/// First matching rule wins; falls back to `default` or fails.
pub struct ScriptedMock {
    fixture: MockFixture,
    calls: AtomicUsize,
}

impl ScriptedMock {
    pub fn new(fixture: MockFixture) -> Self {
        Self {
            fixture,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn fixed(reply: MockReply) -> Self {
        Self::new(MockFixture {
            rules: Vec::new(),
            default: Some(reply),
        })
    }

    /// Number of completions served so far (cache hits never reach here).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedMock {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, req: &GenerationRequest) -> Result<RawCompletion, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let reply = self
            .fixture
            .rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| r.reply.clone())
            .or_else(|| self.fixture.default.clone())
            .ok_or_else(|| {
                let head: String = req.last_user().unwrap_or("").chars().take(60).collect();
                LlmError::NoMockRule(head)
            })?;
        Ok(reply.into_completion(&req.model))
    }
}

type ReplyFn = dyn Fn(&GenerationRequest) -> Result<MockReply, LlmError> + Send + Sync;

/// Closure-driven backend for property tests.
pub struct FnMock {
    f: Box<ReplyFn>,
}

impl FnMock {
    pub fn new(f: impl Fn(&GenerationRequest) -> Result<MockReply, LlmError> + Send + Sync + 'static) -> Self {
        Self { f: Box::new(f) }
    }
}

impl Backend for FnMock {
    fn name(&self) -> &str {
        "fn-mock"
    }

    fn complete(&self, req: &GenerationRequest) -> Result<RawCompletion, LlmError> {
        (self.f)(req).map(|r| r.into_completion(&req.model))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{DecodeParams, Message, Role};
    use proptest::prelude::*;

    #[test]
    fn tokenizes_python_list() {
        let toks: Vec<String> = mock_tokenize("[('food', 'positive')]").into_iter().map(|t| t.0).collect();
        assert_eq!(toks, ["[", "(", "'", "food", "'", ",", " '", "positive", "'", ")", "]"]);
        let toks: Vec<String> = mock_tokenize("Aspects: bar, onion rings\n").into_iter().map(|t| t.0).collect();
        assert_eq!(toks, ["Aspects", ":", " bar", ",", " onion", " rings", "\n"]);
        assert!(mock_tokenize("").is_empty());
    }

    #[test]
    fn rules_resolve_in_order() {
        let fixture = MockFixture {
            rules: vec![
                MockRule {
                    contains: vec!["pizza".into()],
                    context: vec![],
                    agent: None,
                    reply: MockReply::uniform("[('food', 'positive')]", -0.1).with_token("food", -0.5),
                },
                MockRule {
                    contains: vec![],
                    context: vec!["waiter".into()],
                    agent: None,
                    reply: MockReply::uniform("[('service', 'negative')]", -0.2),
                },
            ],
            default: None,
        };
        let mock = ScriptedMock::new(fixture);
        let mk = |t: &str| GenerationRequest {
            model: "m".into(),
            messages: vec![Message::new(Role::System, "sys waiter"), Message::new(Role::User, t)],
            decode: DecodeParams::default(),
        };
        let c = mock.complete(&mk("great pizza")).unwrap();
        assert_eq!(c.text, "[('food', 'positive')]");
        assert_eq!(c.tokens[3].logprob, -0.5);
        assert_eq!(c.tokens[0].logprob, -0.1);
        assert_eq!(mock.complete(&mk("other")).unwrap().text, "[('service', 'negative')]");
        let bare = GenerationRequest {
            model: "m".into(),
            messages: vec![Message::new(Role::User, "nothing")],
            decode: DecodeParams::default(),
        };
        assert!(matches!(mock.complete(&bare), Err(LlmError::NoMockRule(_))));
        assert_eq!(mock.calls(), 3);
    }

    proptest! {
        #[test]
        fn tokens_partition_text(text in "\\PC{0,50}") {
            let toks = mock_tokenize(&text);
            let mut pos = 0;
            for (t, (s, e)) in &toks {
                prop_assert_eq!(*s, pos);
                prop_assert!(e > s);
                prop_assert_eq!(&text[*s..*e], t.as_str());
                pos = *e;
            }
            prop_assert_eq!(pos, text.len());
        }
    }
}
