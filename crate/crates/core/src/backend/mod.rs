//! Completion clients and decoding configuration.
//!
//! [`Client`] is the single entry point used by the generator. It validates
//! the decoding config, checks backend capabilities, retries transient
//! failures with exponential backoff and strips stop sequences from the
//! returned text. The transport behind it is any [`CompletionBackend`]: the
//! OpenAI-compatible [`HttpBackend`] or the deterministic [`ScriptedBackend`].

mod http;
mod scripted;

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, WireRequest};
pub use scripted::{RecordedRequest, ScriptEntry, ScriptedBackend};

pub const DEFAULT_AUTH_ENV: &str = "AUTOCONV_API_KEY";

/// Endpoint prefix selecting the offline document-echo backend.
pub const SCRIPTED_ENDPOINT_PREFIX: &str = "scripted:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Nucleus { top_p: f64 },
    Beam { width: u32 },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Nucleus { .. } => "nucleus",
            Strategy::Beam { .. } => "beam",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    #[serde(flatten)]
    pub strategy: Strategy,
    pub max_new_tokens: u32,
    #[serde(rename = "stop", default, skip_serializing_if = "Vec::is_empty")]
    pub stop_sequences: Vec<String>,
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DecodingConfig {
    pub fn greedy(max_new_tokens: u32) -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens,
            stop_sequences: Vec::new(),
            temperature: 0.0,
            seed: None,
        }
    }

    /// Nucleus sampling at temperature 1.0.
    pub fn nucleus(top_p: f64, max_new_tokens: u32) -> Self {
        Self {
            strategy: Strategy::Nucleus { top_p },
            max_new_tokens,
            stop_sequences: Vec::new(),
            temperature: 1.0,
            seed: None,
        }
    }

    pub fn beam(width: u32, max_new_tokens: u32) -> Self {
        Self {
            strategy: Strategy::Beam { width },
            max_new_tokens,
            stop_sequences: Vec::new(),
            temperature: 0.0,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn with_stops<I: IntoIterator<Item = S>, S: Into<String>>(mut self, stops: I) -> Self {
        self.stop_sequences = stops.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    TopPOutOfRange(f64),
    BeamWidthZero,
    MaxNewTokensZero,
    BadTemperature(f64),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TopPOutOfRange(p) => write!(f, "top_p out of range: {p} not in (0, 1]"),
            Violation::BeamWidthZero => write!(f, "beam width must be at least 1"),
            Violation::MaxNewTokensZero => write!(f, "max_new_tokens must be at least 1"),
            Violation::BadTemperature(t) => write!(f, "temperature must be finite and >= 0, got {t}"),
        }
    }
}

/// Lists every invariant the config breaks.
pub fn validate_config(config: &DecodingConfig) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    match config.strategy {
        Strategy::Nucleus { top_p } if !(top_p > 0.0 && top_p <= 1.0) => v.push(Violation::TopPOutOfRange(top_p)),
        Strategy::Beam { width: 0 } => v.push(Violation::BeamWidthZero),
        _ => {}
    }
    if config.max_new_tokens == 0 {
        v.push(Violation::MaxNewTokensZero);
    }
    if !(config.temperature.is_finite() && config.temperature >= 0.0) {
        v.push(Violation::BadTemperature(config.temperature));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub tokens: Option<Vec<String>>,
    pub token_logprobs: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            tokens: None,
            token_logprobs: None,
            finish_reason: FinishReason::Stop,
        }
    }

    /// Builds a completion whose text is the concatenation of `tokens`.
    pub fn from_tokens(tokens: Vec<String>, logprobs: Vec<f64>) -> Self {
        assert_eq!(tokens.len(), logprobs.len(), "one logprob per token");
        Completion {
            text: tokens.concat(),
            tokens: Some(tokens),
            token_logprobs: Some(logprobs),
            finish_reason: FinishReason::Stop,
        }
    }

    /// Cuts the text at the earliest stop sequence, dropping tokens that
    /// start at or after the cut.
    fn truncate_at_stop(&mut self, stops: &[String]) {
        let cut = stops
            .iter()
            .filter(|s| !s.is_empty())
            .filter_map(|s| self.text.find(s.as_str()))
            .min();
        let Some(cut) = cut else { return };
        self.text.truncate(cut);
        self.finish_reason = FinishReason::Stop;
        if let (Some(tokens), Some(lps)) = (&mut self.tokens, &mut self.token_logprobs) {
            let mut offset = 0;
            let keep = tokens
                .iter()
                .take_while(|t| {
                    let start = offset;
                    offset += t.len();
                    start < cut
                })
                .count();
            tokens.truncate(keep);
            lps.truncate(keep);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    /// Fractional jitter applied symmetrically around each delay.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff_ms: 500,
            jitter: 0.2,
        }
    }
}

/// Delay before retry number `attempt` (1-based):
/// `base * 2^(attempt-1) * (1 + jitter * u)` with `u` in `[-1, 1]`.
pub fn backoff_delay(policy: &RetryPolicy, attempt: u32, u: f64) -> Duration {
    let exp = 2f64.powi(attempt.saturating_sub(1) as i32);
    let factor = (1.0 + policy.jitter * u.clamp(-1.0, 1.0)).max(0.0);
    Duration::from_secs_f64(policy.base_backoff_ms as f64 / 1000.0 * exp * factor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    pub endpoint: String,
    pub model_id: String,
    #[serde(default = "default_auth_env")]
    pub auth_env: String,
    pub timeout_ms: u64,
    pub retry: RetryPolicy,
    /// Whether the endpoint honours `best_of` as beam width.
    #[serde(default)]
    pub supports_beam: bool,
    #[serde(default = "yes")]
    pub logprobs: bool,
}

fn default_auth_env() -> String {
    DEFAULT_AUTH_ENV.to_owned()
}

fn yes() -> bool {
    true
}

impl BackendSpec {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>) -> Self {
        BackendSpec {
            endpoint: endpoint.into(),
            model_id: model_id.into(),
            auth_env: default_auth_env(),
            timeout_ms: 60_000,
            retry: RetryPolicy::default(),
            supports_beam: false,
            logprobs: true,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.retry.max_attempts < 1 {
            errs.push("backend.max_attempts must be at least 1".to_owned());
        }
        if self.timeout_ms == 0 {
            errs.push("backend.timeout_ms must be positive".to_owned());
        }
        if !(self.retry.jitter >= 0.0 && self.retry.jitter <= 1.0) {
            errs.push("backend.jitter must lie in [0, 1]".to_owned());
        }
        if self.model_id.trim().is_empty() {
            errs.push("backend.model must not be empty".to_owned());
        }
        if !self.is_scripted() && reqwest::Url::parse(&self.endpoint).is_err() {
            errs.push(format!("backend.endpoint is not a valid URL: {:?}", self.endpoint));
        }
        errs
    }

    pub fn is_scripted(&self) -> bool {
        self.endpoint.starts_with(SCRIPTED_ENDPOINT_PREFIX)
    }
}

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited (HTTP 429)")]
    RateLimited,
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("invalid decoding config: {}", join(.0))]
    InvalidConfig(Vec<Violation>),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("script exhausted at request {ordinal}")]
    ScriptExhausted { ordinal: usize },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<BackendError> },
}

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

impl BackendError {
    /// Failures worth retrying.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Timeout | BackendError::RateLimited | BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

/// A single-attempt transport.
pub trait CompletionBackend: Send + Sync {
    fn model_id(&self) -> &str;

    fn supports_beam(&self) -> bool {
        false
    }

    fn send(&self, prompt: &str, config: &DecodingConfig) -> Result<Completion, BackendError>;
}

#[derive(Clone)]
pub struct Client {
    backend: Arc<dyn CompletionBackend>,
    retry: RetryPolicy,
}

impl fmt::Debug for Client {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Client")
            .field("model_id", &self.backend.model_id())
            .field("retry", &self.retry)
            .finish()
    }
}

impl Client {
    pub fn new(backend: Arc<dyn CompletionBackend>, retry: RetryPolicy) -> Self {
        Client { backend, retry }
    }

    /// Builds the transport named by `spec.endpoint`. `scripted:` endpoints
    /// select the offline document-echo backend.
    pub fn from_spec(spec: &BackendSpec) -> Result<Self, BackendError> {
        let backend: Arc<dyn CompletionBackend> = if spec.is_scripted() {
            Arc::new(ScriptedBackend::document_echo(&spec.model_id))
        } else {
            Arc::new(HttpBackend::new(spec)?)
        };
        Ok(Client::new(backend, spec.retry.clone()))
    }

    pub fn model_id(&self) -> &str {
        self.backend.model_id()
    }

    pub fn complete(&self, prompt: &str, config: &DecodingConfig) -> Result<Completion, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::EmptyPrompt);
        }
        validate_config(config).map_err(BackendError::InvalidConfig)?;
        if matches!(config.strategy, Strategy::Beam { .. }) && !self.backend.supports_beam() {
            return Err(BackendError::Capability(format!(
                "backend {} does not support beam search",
                self.backend.model_id()
            )));
        }

        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match self.backend.send(prompt, config) {
                Ok(mut completion) => {
                    completion.truncate_at_stop(&config.stop_sequences);
                    return Ok(completion);
                }
                Err(e) if e.is_transient() => {
                    if attempt >= max_attempts {
                        return Err(BackendError::Exhausted {
                            attempts: attempt,
                            last: Box::new(e),
                        });
                    }
                    let u = rand::rng().random_range(-1.0..=1.0);
                    std::thread::sleep(backoff_delay(&self.retry, attempt, u));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
