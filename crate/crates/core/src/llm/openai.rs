//! OpenAI-compatible `/chat/completions` transport.

use std::time::Duration;

use serde_json::{json, Value};

use super::{Backend, GenerationRequest, LlmError, RawCompletion, RawToken};

pub struct OpenAiBackend {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl OpenAiBackend {
    /// `endpoint` is either the API base (`https://host/v1`) or the full
    /// chat-completions URL.
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let endpoint = endpoint.trim_end_matches('/');
        let url = if endpoint.ends_with("/chat/completions") {
            endpoint.to_string()
        } else {
            format!("{endpoint}/chat/completions")
        };
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self { url, api_key, agent }
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

pub(crate) fn request_body(req: &GenerationRequest) -> Value {
    json!({
        "model": req.model,
        "messages": req.messages,
        "temperature": req.decode.temperature,
        "max_tokens": req.decode.max_tokens,
        "logprobs": req.decode.logprobs,
        "top_logprobs": req.decode.top_logprobs,
        "stream": false,
    })
}

pub(crate) fn parse_response(body: &Value, fallback_model: &str) -> Result<RawCompletion, LlmError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LlmError::Transport(format!("response has no choices: {}", excerpt(&body.to_string()))))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    let content = choice
        .pointer("/logprobs/content")
        .and_then(Value::as_array)
        .ok_or_else(|| LlmError::Capability("endpoint returned no token logprobs".into()))?;
    let mut tokens = Vec::with_capacity(content.len());
    for entry in content {
        let token = entry.get("token").and_then(Value::as_str).unwrap_or("").to_string();
        let logprob = entry
            .get("logprob")
            .and_then(Value::as_f64)
            .ok_or_else(|| LlmError::Capability("token without logprob".into()))?;
        let bytes = entry.get("bytes").and_then(Value::as_array).map(|arr| {
            arr.iter()
                .filter_map(Value::as_u64)
                .map(|b| b as u8)
                .collect::<Vec<u8>>()
        });
        // Some servers report -inf or tiny positive rounding noise.
        let logprob = if logprob > 0.0 { 0.0 } else { logprob.max(-1e4) };
        tokens.push(RawToken { text: token, logprob, bytes });
    }
    let model = body
        .get("model")
        .and_then(Value::as_str)
        .unwrap_or(fallback_model)
        .to_string();
    Ok(RawCompletion { text, tokens, model })
}

fn excerpt(s: &str) -> String {
    s.chars().take(300).collect()
}

impl Backend for OpenAiBackend {
    fn name(&self) -> &str {
        "openai"
    }

    fn complete(&self, req: &GenerationRequest) -> Result<RawCompletion, LlmError> {
        let mut call = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        let body = match call.send_json(request_body(req)) {
            Ok(resp) => resp
                .into_json::<Value>()
                .map_err(|e| LlmError::Transport(format!("bad JSON body: {e}")))?,
            Err(ureq::Error::Status(status, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                return Err(LlmError::Http {
                    status,
                    body: excerpt(&body),
                });
            }
            Err(ureq::Error::Transport(t)) => return Err(LlmError::Transport(t.to_string())),
        };
        parse_response(&body, &req.model)
    }
}
