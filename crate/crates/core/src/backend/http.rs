use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, BackendSpec, Completion, CompletionBackend, DecodingConfig, FinishReason, Strategy};

/// Request body of the OpenAI-compatible `/completions` endpoint.
///
/// Greedy maps to temperature 0 with no `top_p`; nucleus sends `top_p` with
/// the configured temperature; beam sends `best_of = width` at temperature 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WireRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub best_of: Option<u32>,
}

impl WireRequest {
    pub fn new(model: &str, prompt: &str, config: &DecodingConfig, want_logprobs: bool) -> Self {
        let (temperature, top_p, best_of) = match config.strategy {
            Strategy::Greedy => (0.0, None, None),
            Strategy::Nucleus { top_p } => (config.temperature, Some(top_p), None),
            Strategy::Beam { width } => (0.0, None, Some(width)),
        };
        WireRequest {
            model: model.to_owned(),
            prompt: prompt.to_owned(),
            max_tokens: config.max_new_tokens,
            temperature,
            top_p,
            stop: config.stop_sequences.clone(),
            logprobs: want_logprobs.then_some(1),
            seed: config.seed,
            best_of,
        }
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

/// Parses a completions response body.
pub(crate) fn parse_response(body: &str) -> Result<Completion, BackendError> {
    let resp: WireResponse = serde_json::from_str(body).map_err(|e| BackendError::Malformed(e.to_string()))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::Malformed("response has no choices".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        None | Some("stop") | Some("eos") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    // Logprobs are dropped unless every token has one.
    let (tokens, token_logprobs) = match choice.logprobs {
        Some(lp) if !lp.tokens.is_empty() && lp.tokens.len() == lp.token_logprobs.len() => {
            match lp.token_logprobs.into_iter().collect::<Option<Vec<f64>>>() {
                Some(values) => (Some(lp.tokens), Some(values.into_iter().map(|v| v.min(0.0)).collect())),
                None => (None, None),
            }
        }
        _ => (None, None),
    };
    Ok(Completion {
        text: choice.text,
        tokens,
        token_logprobs,
        finish_reason,
    })
}

/// OpenAI-compatible completions client.
pub struct HttpBackend {
    url: String,
    model_id: String,
    api_key: Option<String>,
    supports_beam: bool,
    logprobs: bool,
    http: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(spec: &BackendSpec) -> Result<Self, BackendError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(spec.timeout_ms))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let base = spec.endpoint.trim_end_matches('/');
        let url = if base.ends_with("/completions") {
            base.to_owned()
        } else {
            format!("{base}/completions")
        };
        Ok(HttpBackend {
            url,
            model_id: spec.model_id.clone(),
            api_key: std::env::var(&spec.auth_env).ok().filter(|k| !k.is_empty()),
            supports_beam: spec.supports_beam,
            logprobs: spec.logprobs,
            http,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }
}

impl CompletionBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn supports_beam(&self) -> bool {
        self.supports_beam
    }

    fn send(&self, prompt: &str, config: &DecodingConfig) -> Result<Completion, BackendError> {
        let body = WireRequest::new(&self.model_id, prompt, config, self.logprobs);
        let mut req = self.http.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        match status {
            200..=299 => parse_response(&text),
            429 => Err(BackendError::RateLimited),
            _ => Err(BackendError::Status {
                status,
                body: text.chars().take(512).collect(),
            }),
        }
    }
}
