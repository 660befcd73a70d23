//! Chat-completion backends.
//!
//! [`HttpBackend`] talks to any OpenAI-compatible `chat/completions` endpoint
//! in non-streaming mode. [`MockBackend`] is a pure function of its
//! parameters and the request, used for offline runs and tests.

mod http;
mod mock;
mod rate_limit;

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpBackend, HttpSettings};
pub use mock::{
    mock_decide, mock_draw, GroundTruth, MockBackend, MockDecision, MockEmission, MockParams, SidecarEntry,
    MOCK_REFUSAL, MOCK_STAGE1_REPLY,
};
pub use rate_limit::TokenBucket;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// 128-bit request identity used as the response-cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint(pub [u8; 16]);

impl Fingerprint {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Serialize)]
struct FingerprintInput<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: Option<f64>,
}

/// SHA-256 over the canonical JSON of (model, messages, temperature),
/// truncated to 128 bits.
pub fn fingerprint(model: &str, messages: &[ChatMessage], temperature: Option<f64>) -> Fingerprint {
    let bytes = serde_json::to_vec(&FingerprintInput {
        model,
        messages,
        temperature,
    })
    .expect("fingerprint input serializes");
    let digest = Sha256::digest(&bytes);
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    Fingerprint(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    Http(HttpSettings),
    Mock(MockParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    /// Short name used in reports and environment variable names.
    pub id: String,
    pub model_name: String,
    /// `None` leaves the field out of the request so the provider default
    /// applies.
    pub temperature: Option<f64>,
    pub max_output_tokens: Option<u32>,
    pub kind: BackendKind,
}

impl BackendConfig {
    pub fn mock(id: impl Into<String>, params: MockParams) -> Self {
        Self {
            id: id.into(),
            model_name: "mock".to_string(),
            temperature: None,
            max_output_tokens: None,
            kind: BackendKind::Mock(params),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.id.is_empty() {
            return Err(BackendError::InvalidConfig("backend id is empty".into()));
        }
        if let Some(t) = self.temperature {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(BackendError::InvalidConfig(format!("temperature {t} must be >= 0")));
            }
        }
        if self.max_output_tokens == Some(0) {
            return Err(BackendError::InvalidConfig("max_output_tokens must be positive".into()));
        }
        match &self.kind {
            BackendKind::Http(h) => h.validate(),
            BackendKind::Mock(m) => m.validate(),
        }
    }
}

/// Environment variable holding the API key of backend `id`.
pub fn default_auth_env(id: &str) -> String {
    let upper: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("DRLLM_API_KEY_{upper}")
}

#[derive(Debug, Clone)]
pub struct BackendResponse {
    pub text: String,
    pub latency: Duration,
    pub request_fingerprint: Fingerprint,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("environment variable {var} is not set; it must hold the API key")]
    MissingAuth { var: String },
    #[error("giving up after {attempts} attempts: {last_error}")]
    RetriesExhausted {
        attempts: u32,
        status: Option<u16>,
        last_error: String,
    },
    #[error("request rejected with HTTP {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed provider response (HTTP {status}): {detail}")]
    MalformedResponse { status: u16, detail: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
    #[error("mock backend has no ground truth for the record in this request")]
    UnknownRecord,
    #[error("response cache: {0}")]
    Cache(String),
}

impl BackendError {
    /// HTTP status attached to the error, when there is one.
    pub fn status(&self) -> Option<u16> {
        match self {
            BackendError::RetriesExhausted { status, .. } => *status,
            BackendError::Rejected { status, .. } | BackendError::MalformedResponse { status, .. } => Some(*status),
            _ => None,
        }
    }
}

/// A chat-completion endpoint. Implementations must be safe to call from
/// several worker threads at once.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn model_name(&self) -> &str;
    fn temperature(&self) -> Option<f64>;
    fn complete(&self, messages: &[ChatMessage]) -> Result<BackendResponse, BackendError>;

    fn fingerprint(&self, messages: &[ChatMessage]) -> Fingerprint {
        fingerprint(self.model_name(), messages, self.temperature())
    }
}

pub(crate) fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::InvalidRequest("no messages".into()));
    }
    if let Some(i) = messages.iter().position(|m| m.content.is_empty()) {
        return Err(BackendError::InvalidRequest(format!("message {i} is empty")));
    }
    Ok(())
}

/// Instantiates the backend described by `config`. Mock backends answer
/// from `truth`; HTTP backends resolve their API key here, so a missing key
/// fails before any request is sent.
pub fn build_backend(config: &BackendConfig, truth: GroundTruth) -> Result<Box<dyn ChatBackend>, BackendError> {
    config.validate()?;
    Ok(match &config.kind {
        BackendKind::Http(_) => Box::new(HttpBackend::new(config.clone())?),
        BackendKind::Mock(params) => Box::new(MockBackend::new(
            config.id.clone(),
            config.model_name.clone(),
            *params,
            truth,
        )?),
    })
}
