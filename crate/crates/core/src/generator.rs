//! The role-alternating generation loop.
//!
//! Every utterance is one completion call. The prompt shows the document and
//! the transcript so far and ends with the tag of the role to be generated.
//! User questions are sampled with nucleus decoding, system answers with
//! greedy (or beam) decoding; the loop stops at the turn budget or when the
//! model produces an empty question.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, Client, DecodingConfig, Strategy};
use crate::corpus::{Dialogue, Document, GeneratorMeta, Origin, Role, TokenLogprob, Turn};

pub const USER_TAG: &str = "User:";
pub const SYSTEM_TAG: &str = "System:";
pub const TITLE_PREFIX: &str = "Title: ";
pub const DOCUMENT_PREFIX: &str = "Document: ";

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation params: {0}")]
    InvalidParams(String),
    #[error("{role:?} turns cannot use {strategy} decoding")]
    ConfigRoleMismatch { role: Role, strategy: &'static str },
    #[error("history is not a well-formed prefix ending before a {0:?} turn")]
    InvalidHistory(Role),
    #[error("backend failed at turn {turn_index}: {source}")]
    Backend {
        turn_index: usize,
        #[source]
        source: BackendError,
        /// Turns completed before the failure, for diagnostics only.
        partial: Vec<Turn>,
    },
}

impl GenerationError {
    pub fn backend_error(&self) -> Option<&BackendError> {
        match self {
            GenerationError::Backend { source, .. } => Some(source),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    /// Total utterances, counting questions and answers separately.
    pub turn_budget: usize,
    pub question_config: DecodingConfig,
    pub answer_config: DecodingConfig,
    pub replicate_index: usize,
}

pub const DEFAULT_QUESTION_TOP_P: f64 = 0.9;
pub const DEFAULT_QUESTION_MAX_TOKENS: u32 = 64;
pub const DEFAULT_ANSWER_MAX_TOKENS: u32 = 128;

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            turn_budget: 14,
            question_config: DecodingConfig::nucleus(DEFAULT_QUESTION_TOP_P, DEFAULT_QUESTION_MAX_TOKENS),
            answer_config: DecodingConfig::greedy(DEFAULT_ANSWER_MAX_TOKENS),
            replicate_index: 0,
        }
    }
}

fn check_role(role: Role, config: &DecodingConfig) -> Result<(), GenerationError> {
    let ok = match role {
        Role::User => matches!(config.strategy, Strategy::Nucleus { .. }),
        Role::System => matches!(config.strategy, Strategy::Greedy | Strategy::Beam { .. }),
    };
    if ok {
        Ok(())
    } else {
        Err(GenerationError::ConfigRoleMismatch {
            role,
            strategy: config.strategy.name(),
        })
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.turn_budget < 2 || !self.turn_budget.is_multiple_of(2) {
            return Err(GenerationError::InvalidParams(format!(
                "turn_budget must be even and at least 2, got {}",
                self.turn_budget
            )));
        }
        check_role(Role::User, &self.question_config)?;
        check_role(Role::System, &self.answer_config)?;
        for cfg in [&self.question_config, &self.answer_config] {
            if let Err(v) = crate::backend::validate_config(cfg) {
                let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
                return Err(GenerationError::InvalidParams(msgs.join("; ")));
            }
        }
        Ok(())
    }
}

/// Renders the completion prompt:
///
/// ```text
/// Title: <title>[ - <section>]
/// Document: <text>
///
/// User: <question>
/// System: <answer>
/// <next role tag>
/// ```
pub fn render_prompt(document: &Document, history: &[Turn], next_role: Role) -> String {
    let mut out = String::with_capacity(document.text.len() + 64 * (history.len() + 2));
    out.push_str(TITLE_PREFIX);
    out.push_str(&document.title);
    if let Some(section) = &document.section_title {
        out.push_str(" - ");
        out.push_str(section);
    }
    out.push('\n');
    out.push_str(DOCUMENT_PREFIX);
    out.push_str(&one_line(&document.text));
    out.push_str("\n\n");
    for turn in history {
        out.push_str(turn.role.tag());
        out.push(' ');
        out.push_str(&one_line(&turn.text));
        out.push('\n');
    }
    out.push_str(next_role.tag());
    out
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Stop sequences for every completion: each role tag after a newline.
pub fn stop_sequences() -> Vec<String> {
    vec![format!("\n{USER_TAG}"), format!("\n{SYSTEM_TAG}")]
}

fn clean_completion(text: &str) -> String {
    let mut s = text.trim();
    loop {
        let before = s;
        for tag in [USER_TAG, SYSTEM_TAG] {
            if let Some(rest) = s.strip_prefix(tag) {
                s = rest.trim_start();
            }
        }
        if s == before {
            break;
        }
    }
    for tag in [USER_TAG, SYSTEM_TAG] {
        if let Some(i) = s.find(&format!("\n{tag}")) {
            s = &s[..i];
        }
    }
    s.trim().to_owned()
}

fn history_is_prefix(history: &[Turn], role: Role) -> bool {
    history
        .iter()
        .enumerate()
        .all(|(i, t)| t.index == i && t.role == Role::at(i))
        && Role::at(history.len()) == role
}

/// Generates one utterance. An empty result is the termination sentinel.
pub fn generate_turn(
    client: &Client,
    document: &Document,
    history: &[Turn],
    role: Role,
    config: &DecodingConfig,
) -> Result<Turn, GenerationError> {
    check_role(role, config)?;
    if !history_is_prefix(history, role) {
        return Err(GenerationError::InvalidHistory(role));
    }
    let mut config = config.clone();
    for stop in stop_sequences() {
        if !config.stop_sequences.contains(&stop) {
            config.stop_sequences.push(stop);
        }
    }
    let prompt = render_prompt(document, history, role);
    let index = history.len();
    let completion = client
        .complete(&prompt, &config)
        .map_err(|source| GenerationError::Backend {
            turn_index: index,
            source,
            partial: history.to_vec(),
        })?;

    let text = clean_completion(&completion.text);
    let token_logprobs = match (completion.tokens, completion.token_logprobs) {
        (Some(tokens), Some(lps)) if !text.is_empty() => Some(
            tokens
                .into_iter()
                .zip(lps)
                .map(|(token, logprob)| TokenLogprob { token, logprob })
                .collect(),
        ),
        _ => None,
    };
    Ok(Turn {
        index,
        role,
        text,
        token_logprobs,
        decoding: Some(config),
    })
}

fn digest(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Stable dialogue id: a hash of `(manifest id, document id, replicate)`.
pub fn dialogue_id(manifest_id: &str, doc_id: &str, replicate_index: usize) -> String {
    let d = digest(&[
        manifest_id.as_bytes(),
        doc_id.as_bytes(),
        &(replicate_index as u64).to_le_bytes(),
    ]);
    hex::encode(&d[..12])
}

/// Per-dialogue sampling seed.
pub fn dialogue_seed(base_seed: u64, manifest_id: &str, doc_id: &str, replicate_index: usize) -> u64 {
    let d = digest(&[
        &base_seed.to_le_bytes(),
        manifest_id.as_bytes(),
        doc_id.as_bytes(),
        &(replicate_index as u64).to_le_bytes(),
    ]);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn turn_seed(dialogue_seed: u64, turn_index: usize) -> u64 {
    let d = digest(&[&dialogue_seed.to_le_bytes(), &(turn_index as u64).to_le_bytes()]);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Runs the generation loop for one `(document, replicate)` pair.
///
/// Question requests carry a seed derived from the question config's seed,
/// the manifest, the document and the replicate, so sampling is reproducible
/// on endpoints that honour `seed`. A dialogue that ends before its first
/// System turn comes back with no turns; callers discard it.
pub fn generate_dialogue(
    client: &Client,
    document: &Document,
    params: &GenerationParams,
    manifest_id: &str,
) -> Result<Dialogue, GenerationError> {
    params.validate()?;
    let seed = dialogue_seed(
        params.question_config.seed.unwrap_or(0),
        manifest_id,
        &document.id,
        params.replicate_index,
    );
    let mut turns: Vec<Turn> = Vec::with_capacity(params.turn_budget);
    while turns.len() < params.turn_budget {
        let role = Role::at(turns.len());
        let config = match role {
            Role::User => params.question_config.clone().with_seed(turn_seed(seed, turns.len())),
            Role::System => params.answer_config.clone(),
        };
        let turn = generate_turn(client, document, &turns, role, &config)?;
        if turn.is_sentinel() {
            if role == Role::System {
                // An unanswered question is dropped with the empty answer.
                turns.pop();
            }
            break;
        }
        turns.push(turn);
    }
    Ok(Dialogue {
        id: dialogue_id(manifest_id, &document.id, params.replicate_index),
        doc_id: document.id.clone(),
        origin: Origin::Synthetic,
        turns,
        quality: None,
        generator_meta: Some(GeneratorMeta {
            model_id: client.model_id().to_owned(),
            seed,
            manifest_id: manifest_id.to_owned(),
            replicate_index: params.replicate_index,
        }),
    })
}

/// Negative log-likelihood of an utterance under the generating model, or
/// `None` when the backend returned no logprobs.
pub fn utterance_nll(turn: &Turn) -> Option<f64> {
    turn.token_logprobs
        .as_ref()
        .map(|lps| 0.0 - lps.iter().map(|t| t.logprob).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::backend::{RetryPolicy, ScriptedBackend};
    use crate::corpus::Source;

    fn doc() -> Document {
        Document {
            id: "doc-1".into(),
            title: "Ciara".into(),
            section_title: Some("2006-2007: Ciara: The Evolution and acting debut".into()),
            text: "On December 5, 2006, Ciara released her second studio album.".into(),
            source: Source::Quac,
        }
    }

    fn client(backend: Arc<ScriptedBackend>) -> Client {
        Client::new(
            backend,
            RetryPolicy {
                max_attempts: 1,
                base_backoff_ms: 0,
                jitter: 0.0,
            },
        )
    }

    #[test]
    fn prompt_shapes() {
        let p = render_prompt(&doc(), &[], Role::User);
        assert!(p.ends_with("User:"));
        assert!(p.starts_with("Title: Ciara - 2006-2007"));
        let history = [Turn::human(0, Role::User, "What was the evolution?")];
        let p = render_prompt(&doc(), &history, Role::System);
        assert!(p.ends_with("System:"));
        assert_eq!(p.matches("User:").count(), 1);
        assert_eq!(p, render_prompt(&doc(), &history, Role::System));
    }

    #[test]
    fn prompt_distinguishes_transcripts() {
        let a = [Turn::human(0, Role::User, "a b")];
        let b = [Turn::human(0, Role::User, "a  c")];
        assert_ne!(
            render_prompt(&doc(), &a, Role::System),
            render_prompt(&doc(), &b, Role::System)
        );
        assert_ne!(
            render_prompt(&doc(), &[], Role::User),
            render_prompt(&doc(), &[], Role::System)
        );
    }

    #[test]
    fn completion_cleanup() {
        assert_eq!(
            clean_completion("  What was the evolution? "),
            "What was the evolution?"
        );
        assert_eq!(clean_completion("System: Yes.\nUser: next"), "Yes.");
        assert_eq!(clean_completion(" \n\t "), "");
    }

    #[test]
    fn user_turn_text_is_the_completion() {
        let b = Arc::new(ScriptedBackend::from_texts("m", ["What was the evolution?"]));
        let t = generate_turn(
            &client(b.clone()),
            &doc(),
            &[],
            Role::User,
            &DecodingConfig::nucleus(0.9, 64),
        )
        .unwrap();
        assert_eq!(t.role, Role::User);
        assert_eq!(t.text, "What was the evolution?");
        let rec = &b.recorded()[0];
        assert_eq!(rec.config.stop_sequences, stop_sequences());
        assert_eq!(t.decoding.as_ref(), Some(&rec.config));
    }

    #[test]
    fn whitespace_completion_is_a_sentinel() {
        let b = Arc::new(ScriptedBackend::from_texts("m", ["   "]));
        let t = generate_turn(&client(b), &doc(), &[], Role::User, &DecodingConfig::nucleus(0.9, 64)).unwrap();
        assert!(t.is_sentinel());
    }

    #[test]
    fn system_turn_rejects_nucleus() {
        let b = Arc::new(ScriptedBackend::from_texts("m", ["x"]));
        let history = [Turn::human(0, Role::User, "q")];
        let err = generate_turn(
            &client(b.clone()),
            &doc(),
            &history,
            Role::System,
            &DecodingConfig::nucleus(0.9, 8),
        );
        assert!(matches!(
            err,
            Err(GenerationError::ConfigRoleMismatch { role: Role::System, .. })
        ));
        assert!(b.recorded().is_empty());
    }

    #[test]
    fn full_budget_dialogue() {
        let texts: Vec<String> = (0..14).map(|i| format!("utterance {i}")).collect();
        let b = Arc::new(ScriptedBackend::from_texts("opt", texts));
        let d = generate_dialogue(&client(b.clone()), &doc(), &GenerationParams::default(), "m1").unwrap();
        assert_eq!(d.turns.len(), 14);
        d.validate().unwrap();
        for (turn, rec) in d.turns.iter().zip(b.recorded()) {
            let expect_nucleus = turn.role == Role::User;
            assert_eq!(matches!(rec.config.strategy, Strategy::Nucleus { .. }), expect_nucleus);
        }
        let meta = d.generator_meta.unwrap();
        assert_eq!(
            (meta.model_id.as_str(), meta.manifest_id.as_str(), meta.replicate_index),
            ("opt", "m1", 0)
        );
    }

    #[test]
    fn empty_question_stops_early() {
        let b = Arc::new(ScriptedBackend::from_texts("m", ["q1", "a1", "q2", "a2", "", "a3"]));
        let d = generate_dialogue(&client(b.clone()), &doc(), &GenerationParams::default(), "m").unwrap();
        assert_eq!(d.turns.len(), 4);
        assert_eq!(b.recorded().len(), 5);
    }

    #[test]
    fn empty_answer_drops_its_question() {
        let b = Arc::new(ScriptedBackend::from_texts("m", ["q1", "a1", "q2", ""]));
        let d = generate_dialogue(&client(b), &doc(), &GenerationParams::default(), "m").unwrap();
        assert_eq!(d.turns.len(), 2);
    }

    #[test]
    fn backend_failure_carries_partial_transcript() {
        let b = Arc::new(ScriptedBackend::from_texts("m", ["q1", "a1", "q2"]));
        match generate_dialogue(&client(b), &doc(), &GenerationParams::default(), "m") {
            Err(GenerationError::Backend {
                turn_index, partial, ..
            }) => {
                assert_eq!(turn_index, 3);
                assert_eq!(partial.len(), 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ids_are_stable_and_distinct() {
        assert_eq!(dialogue_id("m", "d", 0), dialogue_id("m", "d", 0));
        assert_ne!(dialogue_id("m", "d", 0), dialogue_id("m", "d", 1));
        assert_ne!(dialogue_id("m", "d1", 0), dialogue_id("m", "d", 10));
    }

    #[test]
    fn params_validation() {
        assert!(GenerationParams::default().validate().is_ok());
        let p = GenerationParams {
            turn_budget: 13,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = GenerationParams {
            question_config: DecodingConfig::greedy(8),
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = GenerationParams {
            answer_config: DecodingConfig::beam(3, 8),
            ..Default::default()
        };
        assert!(p.validate().is_ok());
    }

    #[test]
    fn nll_sums_negated_logprobs() {
        let mut t = Turn::human(1, Role::System, "a b c");
        assert_eq!(utterance_nll(&t), None);
        let lp = |v: &[f64]| {
            Some(
                v.iter()
                    .map(|&logprob| TokenLogprob {
                        token: "x".into(),
                        logprob,
                    })
                    .collect(),
            )
        };
        t.token_logprobs = lp(&[0.0, 0.0]);
        assert_eq!(utterance_nll(&t), Some(0.0));
        assert!(utterance_nll(&t).unwrap().is_sign_positive());
        t.token_logprobs = lp(&[-1.0, -2.0, -0.5]);
        assert_eq!(utterance_nll(&t), Some(3.5));
    }
}
