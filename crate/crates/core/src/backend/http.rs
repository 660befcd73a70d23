use std::time::{Duration, Instant};

use rand::Rng;
use reqwest::blocking::Client;
use reqwest::header::CONTENT_TYPE;
use serde::{Deserialize, Serialize};

use super::{
    validate_messages, BackendConfig, BackendError, BackendKind, BackendResponse, ChatBackend, ChatMessage, TokenBucket,
};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpSettings {
    /// Full URL of the chat-completions endpoint.
    pub endpoint_url: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First backoff delay; doubles on each retry, plus up to the same
    /// amount of random jitter.
    pub retry_base_delay: Duration,
    pub requests_per_second: f64,
}

impl HttpSettings {
    pub fn new(endpoint_url: impl Into<String>, auth_env: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            auth_env: auth_env.into(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            retry_base_delay: Duration::from_millis(500),
            requests_per_second: 5.0,
        }
    }

    pub(super) fn validate(&self) -> Result<(), BackendError> {
        if self.endpoint_url.is_empty() {
            return Err(BackendError::InvalidConfig("http backend needs an endpoint url".into()));
        }
        if self.auth_env.is_empty() {
            return Err(BackendError::InvalidConfig(
                "http backend needs an auth variable name".into(),
            ));
        }
        if !(self.requests_per_second > 0.0 && self.requests_per_second.is_finite()) {
            return Err(BackendError::InvalidConfig(
                "requests_per_second must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    stream: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_tokens: Option<u32>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Retry { status: Option<u16>, error: String },
    Fail(BackendError),
}

/// Blocking OpenAI-style chat-completions client with retry and rate limit.
pub struct HttpBackend {
    config: BackendConfig,
    settings: HttpSettings,
    token: String,
    client: Client,
    bucket: TokenBucket,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("id", &self.config.id)
            .field("endpoint", &self.settings.endpoint_url)
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        let settings = match &config.kind {
            BackendKind::Http(s) => s.clone(),
            BackendKind::Mock(_) => {
                return Err(BackendError::InvalidConfig(format!(
                    "backend `{}` is not http",
                    config.id
                )))
            }
        };
        config.validate()?;
        let token = std::env::var(&settings.auth_env)
            .ok()
            .filter(|t| !t.trim().is_empty())
            .ok_or_else(|| BackendError::MissingAuth {
                var: settings.auth_env.clone(),
            })?;
        let client = Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let bucket = TokenBucket::new(settings.requests_per_second);
        Ok(Self {
            config,
            settings,
            token,
            client,
            bucket,
        })
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.settings.retry_base_delay;
        let exp = base.saturating_mul(1u32 << retry.min(16));
        let jitter_ms = base.as_millis() as u64;
        let jitter = if jitter_ms > 0 {
            Duration::from_millis(rand::rng().random_range(0..=jitter_ms))
        } else {
            Duration::ZERO
        };
        exp + jitter
    }

    fn attempt(&self, body: &[u8]) -> Attempt {
        self.bucket.acquire();
        let response = self
            .client
            .post(&self.settings.endpoint_url)
            .bearer_auth(&self.token)
            .header(CONTENT_TYPE, "application/json")
            .body(body.to_vec())
            .send();
        let response = match response {
            Ok(r) => r,
            Err(e) if e.is_timeout() || e.is_connect() || e.is_request() => {
                return Attempt::Retry {
                    status: None,
                    error: e.to_string(),
                }
            }
            Err(e) => return Attempt::Fail(BackendError::Transport(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => {
                return Attempt::Retry {
                    status: Some(status),
                    error: e.to_string(),
                }
            }
            Err(e) => return Attempt::Fail(BackendError::Transport(e.to_string())),
        };
        if status == 429 || (500..600).contains(&status) {
            return Attempt::Retry {
                status: Some(status),
                error: format!("HTTP {status}"),
            };
        }
        if !(200..300).contains(&status) {
            return Attempt::Fail(BackendError::Rejected { status, body: text });
        }
        let parsed: ChatResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => {
                return Attempt::Fail(BackendError::MalformedResponse {
                    status,
                    detail: e.to_string(),
                })
            }
        };
        match parsed.choices.into_iter().next().and_then(|c| c.message.content) {
            Some(content) => Attempt::Done(content),
            None => Attempt::Fail(BackendError::MalformedResponse {
                status,
                detail: "no message content in first choice".into(),
            }),
        }
    }
}

impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn model_name(&self) -> &str {
        &self.config.model_name
    }

    fn temperature(&self) -> Option<f64> {
        self.config.temperature
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<BackendResponse, BackendError> {
        validate_messages(messages)?;
        let body = serde_json::to_vec(&ChatRequest {
            model: &self.config.model_name,
            messages,
            stream: false,
            temperature: self.config.temperature,
            max_tokens: self.config.max_output_tokens,
        })
        .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
        let start = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    return Ok(BackendResponse {
                        text,
                        latency: start.elapsed(),
                        request_fingerprint: self.fingerprint(messages),
                    })
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry { status, error } => {
                    if attempts > self.settings.max_retries {
                        return Err(BackendError::RetriesExhausted {
                            attempts,
                            status,
                            last_error: error,
                        });
                    }
                    std::thread::sleep(self.backoff(attempts - 1));
                }
            }
        }
    }
}
