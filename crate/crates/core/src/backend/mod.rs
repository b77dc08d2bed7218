//! Gateway to completion and embedding providers.
//!
//! [`LlmClient`] layers a content-addressed response cache, exponential
//! back-off, and an in-flight limit over any [`CompletionBackend`]
//! transport: the live HTTP endpoint, a recorder, or a replay store.

mod client;
mod embed;
mod http;
mod replay;
mod retry;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use client::LlmClient;
pub use embed::{Embedder, HashEmbedder};
pub use http::{HttpBackend, HttpEmbedder, API_KEY_ENV};
pub use replay::{read_store, RecordingBackend, ReplayBackend, StoreEntry};
pub use retry::{RecordingSleeper, RetryPolicy, Sleeper, ThreadSleeper};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Rate limiting, 5xx, dropped connections: worth retrying.
    #[error("transient backend failure: {0}")]
    Transient(String),

    #[error("backend protocol error: {0}")]
    Protocol(String),

    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },

    #[error("replay store has no response for key {key}")]
    ReplayMiss { key: String },

    #[error("corrupt replay store {path} at line {line}: {reason}")]
    CorruptStore { path: String, line: usize, reason: String },

    #[error("invalid completion parameters: {0}")]
    InvalidParams(String),

    #[error("invalid retry policy: {0}")]
    InvalidPolicy(String),

    #[error("empty prompt")]
    EmptyPrompt,

    #[error("cannot embed empty text")]
    EmptyText,

    #[error("backend unavailable: {0}")]
    Unavailable(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transient(_))
    }
}

impl From<std::io::Error> for BackendError {
    fn from(e: std::io::Error) -> Self {
        BackendError::Io(e.to_string())
    }
}

/// The six prompt families the pipeline and the metrics issue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    RfeExtraction,
    DialogueExtraction,
    UnknownResolver,
    Summarization,
    MetricExtraction,
    MetricVerification,
}

impl PromptKind {
    pub const ALL: [PromptKind; 6] = [
        PromptKind::RfeExtraction,
        PromptKind::DialogueExtraction,
        PromptKind::UnknownResolver,
        PromptKind::Summarization,
        PromptKind::MetricExtraction,
        PromptKind::MetricVerification,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::RfeExtraction => "rfe_extraction",
            PromptKind::DialogueExtraction => "dialogue_extraction",
            PromptKind::UnknownResolver => "unknown_resolver",
            PromptKind::Summarization => "summarization",
            PromptKind::MetricExtraction => "metric_extraction",
            PromptKind::MetricVerification => "metric_verification",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown prompt kind `{s}`"))
    }
}

/// Sampling parameters sent with every completion request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
}

impl CompletionParams {
    pub fn new(temperature: f64, max_tokens: u32, top_p: f64) -> Result<Self, BackendError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(BackendError::InvalidParams(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        if max_tokens == 0 {
            return Err(BackendError::InvalidParams("max_tokens must be positive".into()));
        }
        if !(top_p > 0.0 && top_p <= 1.0) {
            return Err(BackendError::InvalidParams(format!("top_p {top_p} outside (0, 1]")));
        }
        Ok(Self {
            temperature,
            max_tokens,
            top_p,
        })
    }
}

/// Per-kind sampling defaults.
///
/// | kind                | temperature | max_tokens | top_p |
/// |---------------------|-------------|------------|-------|
/// | rfe_extraction      | 0.1         | 200        | 1.0   |
/// | dialogue_extraction | 0.1         | 200        | 1.0   |
/// | unknown_resolver    | 0.1         | 200        | 1.0   |
/// | summarization       | 0.7         | 512        | 1.0   |
/// | metric_extraction   | 0.0         | 200        | 1.0   |
/// | metric_verification | 0.0         | 200        | 1.0   |
pub fn default_params(kind: PromptKind) -> CompletionParams {
    let (temperature, max_tokens) = match kind {
        PromptKind::RfeExtraction | PromptKind::DialogueExtraction | PromptKind::UnknownResolver => (0.1, 200),
        PromptKind::Summarization => (0.7, 512),
        PromptKind::MetricExtraction | PromptKind::MetricVerification => (0.0, 200),
    };
    CompletionParams {
        temperature,
        max_tokens,
        top_p: 1.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub kind: PromptKind,
    pub prompt: String,
    pub params: CompletionParams,
}

impl CompletionRequest {
    /// A request carrying the default parameters for `kind`.
    pub fn new(kind: PromptKind, prompt: impl Into<String>) -> Self {
        Self {
            kind,
            prompt: prompt.into(),
            params: default_params(kind),
        }
    }

    pub fn with_params(mut self, params: CompletionParams) -> Self {
        self.params = params;
        self
    }
}

/// SHA-256 over (prompt kind, prompt text, params), hex encoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn of(req: &CompletionRequest) -> Self {
        let mut h = Sha256::new();
        h.update(req.kind.as_str().as_bytes());
        h.update([0x1f]);
        h.update((req.prompt.len() as u64).to_be_bytes());
        h.update(req.prompt.as_bytes());
        h.update([0x1f]);
        h.update(req.params.temperature.to_bits().to_be_bytes());
        h.update(req.params.max_tokens.to_be_bytes());
        h.update(req.params.top_p.to_bits().to_be_bytes());
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn from_hex(hex: impl Into<String>) -> Self {
        CacheKey(hex.into())
    }

    pub fn as_hex(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Hex SHA-256 of a prompt, as stored in call traces.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// A transport that turns one request into raw completion text.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError>;
}

impl<T: CompletionBackend + ?Sized> CompletionBackend for std::sync::Arc<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        (**self).complete(req)
    }
}

/// A backend driven by a closure; the usual way to script completions.
pub struct FnBackend<F>(pub F);

impl<F> CompletionBackend for FnBackend<F>
where
    F: Fn(&CompletionRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, req: &CompletionRequest) -> Result<String, BackendError> {
        (self.0)(req)
    }
}
