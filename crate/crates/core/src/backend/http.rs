//! Completion-style HTTP JSON transport.
//!
//! Requests are `POST {endpoint}` with body
//! `{"model", "prompt", "temperature", "max_tokens", "top_p"}` and the API key
//! as a bearer token. The completion is read from `choices[0].text`.

use std::time::Duration;

use serde_json::{json, Value};
use ureq::Agent;

use super::{BackendError, CompletionBackend, CompletionRequest, Embedder};

/// Environment variable holding the API secret.
pub const API_KEY_ENV: &str = "MEDSUM_API_KEY";

pub struct HttpBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: Agent,
}

impl HttpBackend {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            agent: agent(Duration::from_secs(120)),
        }
    }

    /// Reads the key from [`API_KEY_ENV`]; a missing key is allowed for local servers.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self::new(endpoint, model, std::env::var(API_KEY_ENV).ok())
    }

    pub fn request_body(&self, req: &CompletionRequest) -> Value {
        json!({
            "model": self.model,
            "prompt": req.prompt,
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
            "top_p": req.params.top_p,
        })
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        let body = post_json(
            &self.agent,
            &self.endpoint,
            self.api_key.as_deref(),
            &self.request_body(req),
        )?;
        body.pointer("/choices/0/text")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Protocol("response has no choices[0].text".into()))
    }
}

/// Embedding gateway speaking `{"model", "input"}` → `data[0].embedding`.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    dimension: usize,
    agent: Agent,
}

impl HttpEmbedder {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        dimension: usize,
    ) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            dimension,
            agent: agent(Duration::from_secs(60)),
        }
    }
}

impl Embedder for HttpEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::EmptyText);
        }
        let body = json!({"model": self.model, "input": text});
        let out = post_json(&self.agent, &self.endpoint, self.api_key.as_deref(), &body)?;
        let vector: Vec<f64> = out
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| BackendError::Protocol("non-numeric embedding".into()))
            })
            .collect::<Result<_, _>>()?;
        if vector.len() != self.dimension {
            return Err(BackendError::Protocol(format!(
                "embedding has dimension {}, expected {}",
                vector.len(),
                self.dimension
            )));
        }
        Ok(vector)
    }
}

fn agent(timeout: Duration) -> Agent {
    Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(timeout))
        .build()
        .into()
}

fn post_json(agent: &Agent, url: &str, api_key: Option<&str>, body: &Value) -> Result<Value, BackendError> {
    let mut request = agent.post(url).header("Content-Type", "application/json");
    if let Some(key) = api_key {
        request = request.header("Authorization", format!("Bearer {key}"));
    }
    let mut response = request.send_json(body).map_err(classify)?;
    let status = response.status().as_u16();
    let text = response
        .body_mut()
        .read_to_string()
        .map_err(|e| BackendError::Transient(format!("reading response body: {e}")))?;
    match status {
        200..=299 => {
            serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("invalid JSON response: {e}")))
        }
        408 | 409 | 429 | 500..=599 => Err(BackendError::Transient(format!("HTTP {status}: {}", snippet(&text)))),
        _ => Err(BackendError::Protocol(format!("HTTP {status}: {}", snippet(&text)))),
    }
}

fn classify(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::StatusCode(code) if code == 429 || code >= 500 => BackendError::Transient(format!("HTTP {code}")),
        ureq::Error::StatusCode(code) => BackendError::Protocol(format!("HTTP {code}")),
        ureq::Error::BadUri(u) => BackendError::Unavailable(format!("bad endpoint URI {u}")),
        other => BackendError::Transient(other.to_string()),
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(200).collect()
}
