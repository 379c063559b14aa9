//! Deterministic in-process backend for tests and offline runs.

use std::collections::HashSet;
use std::sync::Mutex;

use super::{BackendError, Completion, CompletionBackend, DecodingConfig};
use crate::generator::{DOCUMENT_PREFIX, SYSTEM_TAG, USER_TAG};

#[derive(Debug, Clone)]
pub enum ScriptEntry {
    Reply(Completion),
    Fail(BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub ordinal: usize,
    pub prompt: String,
    pub config: DecodingConfig,
}

type Responder = dyn Fn(&str, &DecodingConfig) -> Result<Completion, BackendError> + Send + Sync;

enum Mode {
    Ordinal(Vec<ScriptEntry>),
    Responder(Box<Responder>),
}

/// Replays canned completions and records every request it receives.
///
/// Two modes: an ordinal script answers request `k` with entry `k`; a
/// responder derives the reply from `(prompt, config)` alone, which keeps
/// concurrent runs deterministic regardless of scheduling.
pub struct ScriptedBackend {
    model_id: String,
    mode: Mode,
    fail_every: Option<usize>,
    supports_beam: bool,
    log: Mutex<Log>,
}

#[derive(Default)]
struct Log {
    requests: Vec<RecordedRequest>,
    failed: HashSet<u64>,
}

impl ScriptedBackend {
    pub fn new(model_id: impl Into<String>, script: Vec<ScriptEntry>) -> Self {
        Self::with_mode(model_id.into(), Mode::Ordinal(script))
    }

    /// Convenience for scripts made only of successful text replies.
    pub fn from_texts<I, S>(model_id: impl Into<String>, texts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let script = texts
            .into_iter()
            .map(|t| ScriptEntry::Reply(Completion::text(t)))
            .collect();
        Self::new(model_id, script)
    }

    pub fn responder<F>(model_id: impl Into<String>, f: F) -> Self
    where
        F: Fn(&str, &DecodingConfig) -> Result<Completion, BackendError> + Send + Sync + 'static,
    {
        Self::with_mode(model_id.into(), Mode::Responder(Box::new(f)))
    }

    /// Offline stand-in for a finetuned model: questions name a word from the
    /// document, answers quote one of its sentences.
    pub fn document_echo(model_id: impl Into<String>) -> Self {
        Self::responder(model_id, echo_reply)
    }

    fn with_mode(model_id: String, mode: Mode) -> Self {
        ScriptedBackend {
            model_id,
            mode,
            fail_every: None,
            supports_beam: false,
            log: Mutex::new(Log::default()),
        }
    }

    /// Every `n`-th request (by ordinal) fails with a transient HTTP 503,
    /// except that a given `(prompt, config)` is failed at most once.
    /// Failed requests still consume an ordinal.
    pub fn with_transient_failures(mut self, n: usize) -> Self {
        assert!(n >= 1);
        self.fail_every = Some(n);
        self
    }

    pub fn with_beam(mut self) -> Self {
        self.supports_beam = true;
        self
    }

    pub fn recorded(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("scripted backend log poisoned").requests.clone()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn supports_beam(&self) -> bool {
        self.supports_beam
    }

    fn send(&self, prompt: &str, config: &DecodingConfig) -> Result<Completion, BackendError> {
        // Ordinal assignment, recording and failure injection share one lock.
        let (ordinal, inject) = {
            let mut log = self.log.lock().expect("scripted backend log poisoned");
            let ordinal = log.requests.len();
            log.requests.push(RecordedRequest {
                ordinal,
                prompt: prompt.to_owned(),
                config: config.clone(),
            });
            let inject = self.fail_every.is_some_and(|n| ordinal % n == n - 1) && {
                let key = fnv1a(&[prompt.as_bytes(), format!("{config:?}").as_bytes()]);
                log.failed.insert(key)
            };
            (ordinal, inject)
        };
        if inject {
            return Err(BackendError::Status {
                status: 503,
                body: format!("injected failure at request {ordinal}"),
            });
        }
        match &self.mode {
            Mode::Ordinal(script) => match script.get(ordinal) {
                Some(ScriptEntry::Reply(c)) => Ok(c.clone()),
                Some(ScriptEntry::Fail(e)) => Err(e.clone()),
                None => Err(BackendError::ScriptExhausted { ordinal }),
            },
            Mode::Responder(f) => f(prompt, config),
        }
    }
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const QUESTION_TEMPLATES: [&str; 6] = [
    "What about {}?",
    "Who was involved with {}?",
    "When did {} happen?",
    "Why is {} important?",
    "What else is known about {}?",
    "How did {} come about?",
];

fn echo_reply(prompt: &str, config: &DecodingConfig) -> Result<Completion, BackendError> {
    let document = prompt
        .lines()
        .find_map(|l| l.strip_prefix(DOCUMENT_PREFIX))
        .ok_or_else(|| BackendError::Malformed("prompt has no document line".into()))?
        .trim();
    let transcript: Vec<&str> = prompt
        .lines()
        .filter(|l| l.starts_with(&format!("{USER_TAG} ")) || l.starts_with(&format!("{SYSTEM_TAG} ")))
        .collect();
    let seed = config.seed.unwrap_or(0);

    let text = if prompt.trim_end().ends_with(USER_TAG) {
        let pairs = transcript.len() / 2;
        // Some conversations end early, signalled by an empty question.
        if pairs >= 3 && fnv1a(&[&seed.to_le_bytes(), b"stop"]).is_multiple_of(5) {
            String::new()
        } else {
            let words: Vec<&str> = document
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| w.len() > 3)
                .collect();
            let word = if words.is_empty() {
                "it"
            } else {
                words[(fnv1a(&[&seed.to_le_bytes(), b"word"]) % words.len() as u64) as usize]
            };
            let template = QUESTION_TEMPLATES[(fnv1a(&[&seed.to_le_bytes(), b"tpl"]) % 6) as usize];
            template.replace("{}", word)
        }
    } else {
        let sentences: Vec<&str> = document
            .split_inclusive(['.', '!', '?'])
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        let question = transcript.last().copied().unwrap_or("");
        let k =
            fnv1a(&[question.as_bytes(), &(transcript.len() as u64).to_le_bytes()]) as usize % sentences.len().max(1);
        sentences.get(k).copied().unwrap_or(document).to_owned()
    };

    if text.is_empty() {
        return Ok(Completion::text(""));
    }
    let tokens: Vec<String> = text.split(' ').map(|w| format!(" {w}")).collect();
    let logprobs = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| -((fnv1a(&[t.as_bytes(), &i.to_le_bytes()]) % 2000) as f64) / 1000.0)
        .collect();
    Ok(Completion::from_tokens(tokens, logprobs))
}
