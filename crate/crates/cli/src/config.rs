//! Backend and embedder selection from flags or JSON config files.
//!
//! A backend spec is either `mock:<fixture.json>`, `openai` (endpoint, key
//! and model from `ACSA_ENDPOINT`, `ACSA_API_KEY`, `ACSA_MODEL`), or a path to
//! a JSON file:
//!
//! ```json
//! {"kind": "openai", "endpoint": "${ACSA_ENDPOINT}", "api_key": "${ACSA_API_KEY}",
//!  "model": "my-model", "timeout_secs": 120}
//! {"kind": "mock", "fixture": "fixture.json", "model": "mock"}
//! ```
//!
//! `${VAR}` anywhere in a config string is replaced by the environment
//! variable; an unset variable is an error. Relative fixture paths resolve
//! against the config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use acsa_core::aggregate::{Embedder, HashEmbedder, HttpEmbedder};
use acsa_core::llm::{Backend, MockFixture, OpenAiBackend, ScriptedMock};
use serde_json::Value;

use crate::CliError;

pub fn interpolate(s: &str) -> Result<String, CliError> {
    let mut out = String::new();
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| CliError::Usage(format!("unterminated `${{` in `{s}`")))?;
        let name = &after[..end];
        let value = std::env::var(name)
            .map_err(|_| CliError::Usage(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn interpolate_value(v: Value) -> Result<Value, CliError> {
    Ok(match v {
        Value::String(s) => Value::String(interpolate(&s)?),
        Value::Array(a) => Value::Array(a.into_iter().map(interpolate_value).collect::<Result<_, _>>()?),
        Value::Object(m) => Value::Object(
            m.into_iter()
                .map(|(k, v)| Ok((k, interpolate_value(v)?)))
                .collect::<Result<_, CliError>>()?,
        ),
        other => other,
    })
}

fn load_json(path: &Path) -> Result<Value, CliError> {
    let src = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&src).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    interpolate_value(v)
}

fn field<'a>(v: &'a Value, key: &str) -> Option<&'a str> {
    v.get(key).and_then(Value::as_str).filter(|s| !s.is_empty())
}

fn env(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|s| !s.is_empty())
}

pub struct BackendChoice {
    pub backend: Arc<dyn Backend>,
    pub label: String,
    /// Model named by the config, if any.
    pub model: Option<String>,
}

fn mock_backend(fixture: &Path, model: Option<String>) -> Result<BackendChoice, CliError> {
    let fx = MockFixture::load(fixture).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(BackendChoice {
        backend: Arc::new(ScriptedMock::new(fx)),
        label: format!("mock:{}", fixture.display()),
        model,
    })
}

fn openai_backend(endpoint: Option<String>, key: Option<String>, model: Option<String>, timeout: u64) -> Result<BackendChoice, CliError> {
    let endpoint = endpoint.ok_or_else(|| CliError::Usage("no endpoint: set ACSA_ENDPOINT or `endpoint` in the config".into()))?;
    Ok(BackendChoice {
        backend: Arc::new(OpenAiBackend::new(&endpoint, key, Duration::from_secs(timeout))),
        label: format!("openai:{endpoint}"),
        model,
    })
}

pub fn backend(spec: &str) -> Result<BackendChoice, CliError> {
    if let Some(path) = spec.strip_prefix("mock:") {
        return mock_backend(Path::new(path), None);
    }
    if spec == "openai" {
        return openai_backend(env("ACSA_ENDPOINT"), env("ACSA_API_KEY"), env("ACSA_MODEL"), 120);
    }
    let path = PathBuf::from(spec);
    let v = load_json(&path)?;
    let model = field(&v, "model").map(str::to_string);
    match field(&v, "kind") {
        Some("mock") => {
            let fx = field(&v, "fixture").ok_or_else(|| CliError::Usage("mock config needs `fixture`".into()))?;
            let fx = path.parent().unwrap_or(Path::new(".")).join(fx);
            mock_backend(&fx, model)
        }
        Some("openai") => openai_backend(
            field(&v, "endpoint").map(str::to_string).or_else(|| env("ACSA_ENDPOINT")),
            field(&v, "api_key").map(str::to_string).or_else(|| env("ACSA_API_KEY")),
            model.or_else(|| env("ACSA_MODEL")),
            v.get("timeout_secs").and_then(Value::as_u64).unwrap_or(120),
        ),
        other => Err(CliError::Usage(format!(
            "{}: unknown backend kind {other:?} (expected \"openai\" or \"mock\")",
            path.display()
        ))),
    }
}

/// `hash`, `hash:<dim>`, `http` (endpoint from `ACSA_EMBED_ENDPOINT`, model
/// from `ACSA_EMBED_MODEL`), or a JSON file
/// `{"kind": "http", "endpoint", "model", "api_key"}` / `{"kind": "hash", "dim"}`.
pub fn embedder(spec: &str) -> Result<Box<dyn Embedder>, CliError> {
    if spec == "hash" {
        return Ok(Box::new(HashEmbedder::default()));
    }
    if let Some(dim) = spec.strip_prefix("hash:") {
        let dim: usize = dim
            .parse()
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| CliError::Usage(format!("bad embedding dimension `{dim}`")))?;
        return Ok(Box::new(HashEmbedder::new(dim)));
    }
    let http = |endpoint: Option<String>, model: Option<String>, key: Option<String>| -> Result<Box<dyn Embedder>, CliError> {
        let endpoint = endpoint
            .ok_or_else(|| CliError::Usage("no embedding endpoint: set ACSA_EMBED_ENDPOINT or `endpoint`".into()))?;
        Ok(Box::new(HttpEmbedder::new(
            &endpoint,
            model.unwrap_or_default(),
            key,
            Duration::from_secs(60),
        )))
    };
    if spec == "http" {
        return http(env("ACSA_EMBED_ENDPOINT"), env("ACSA_EMBED_MODEL"), env("ACSA_API_KEY"));
    }
    let v = load_json(Path::new(spec))?;
    match field(&v, "kind") {
        Some("hash") => Ok(Box::new(HashEmbedder::new(
            v.get("dim").and_then(Value::as_u64).unwrap_or(64).max(1) as usize,
        ))),
        Some("http") => http(
            field(&v, "endpoint").map(str::to_string).or_else(|| env("ACSA_EMBED_ENDPOINT")),
            field(&v, "model").map(str::to_string).or_else(|| env("ACSA_EMBED_MODEL")),
            field(&v, "api_key").map(str::to_string).or_else(|| env("ACSA_API_KEY")),
        ),
        other => Err(CliError::Usage(format!("{spec}: unknown embedder kind {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation() {
        std::env::set_var("ACSA_TEST_INTERP", "secret");
        assert_eq!(interpolate("Bearer ${ACSA_TEST_INTERP}!").unwrap(), "Bearer secret!");
        assert_eq!(interpolate("plain").unwrap(), "plain");
        assert!(interpolate("${ACSA_TEST_UNSET_VARIABLE}").is_err());
        assert!(interpolate("${OPEN").is_err());
    }

    #[test]
    fn embedder_specs() {
        assert!(embedder("hash").is_ok());
        assert!(embedder("hash:8").is_ok());
        assert!(embedder("hash:0").is_err());
        assert!(embedder("/nonexistent.json").is_err());
    }
}
