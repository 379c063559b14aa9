//! Documents, dialogues and the dataset files they are stored in.

mod dataset;
mod ingest;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::DecodingConfig;
use crate::quality::QualityReport;

pub(crate) use dataset::dialogue_from_line;
pub use dataset::{dialogue_to_line, read_dataset, read_documents, write_dataset, write_documents, SCHEMA_VERSION};
pub use ingest::{ingest_coqa, ingest_quac, load_gold, COQA_NO_ANSWER, QUAC_NO_ANSWER};

/// Literals the source datasets use for unanswerable questions.
pub const NO_ANSWER_LITERALS: [&str; 2] = [QUAC_NO_ANSWER, COQA_NO_ANSWER];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is empty")]
    Empty { path: String },
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid record {record}: {message}")]
    InvalidRecord { record: String, message: String },
    #[error("line {line}: unsupported schema version {found:?} (expected {expected:?})")]
    SchemaVersion {
        line: usize,
        found: Option<String>,
        expected: &'static str,
    },
    #[error("cannot sample {requested} documents from a corpus of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("validation ratio must lie in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("cannot split an empty dialogue list")]
    EmptySplit,
    #[error("dialogue {id}: {message}")]
    Malformed { id: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Quac,
    Coqa,
    Custom,
}

/// A grounding passage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub section_title: Option<String>,
    pub text: String,
    pub source: Source,
}

impl Document {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.text.trim().is_empty() {
            return Err(CorpusError::InvalidRecord {
                record: self.id.clone(),
                message: "document text is empty".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

impl Role {
    pub fn tag(self) -> &'static str {
        match self {
            Role::User => "User:",
            Role::System => "System:",
        }
    }

    pub fn other(self) -> Role {
        match self {
            Role::User => Role::System,
            Role::System => Role::User,
        }
    }

    /// Role expected at a 0-based position of a well-formed dialogue.
    pub fn at(index: usize) -> Role {
        if index.is_multiple_of(2) {
            Role::User
        } else {
            Role::System
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

/// One utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub role: Role,
    pub text: String,
    #[serde(rename = "logprobs", default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<TokenLogprob>>,
    /// Absent for ingested human turns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoding: Option<DecodingConfig>,
}

impl Turn {
    pub fn human(index: usize, role: Role, text: impl Into<String>) -> Self {
        Turn {
            index,
            role,
            text: text.into(),
            token_logprobs: None,
            decoding: None,
        }
    }

    /// An empty turn signals the end of a generated conversation.
    pub fn is_sentinel(&self) -> bool {
        self.text.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Human,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub model_id: String,
    pub seed: u64,
    pub manifest_id: String,
    pub replicate_index: usize,
}

/// An ordered conversation over one document.
///
/// Field order matches the dataset record layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub doc_id: String,
    pub origin: Origin,
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_meta: Option<GeneratorMeta>,
}

impl Dialogue {
    /// Checks role alternation (starting with User), consecutive indices and
    /// logprob signs.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |message: String| CorpusError::Malformed {
            id: self.id.clone(),
            message,
        };
        for (pos, turn) in self.turns.iter().enumerate() {
            if turn.index != pos {
                return Err(bad(format!("turn at position {pos} has index {}", turn.index)));
            }
            if turn.role != Role::at(pos) {
                return Err(bad(format!(
                    "turn {pos} has role {:?}, roles must alternate starting with User",
                    turn.role
                )));
            }
            if turn.text.is_empty() {
                return Err(bad(format!("turn {pos} is empty")));
            }
            if let Some(lps) = &turn.token_logprobs {
                if let Some(lp) = lps.iter().find(|lp| lp.logprob.is_nan() || lp.logprob > 0.0) {
                    return Err(bad(format!("turn {pos} has logprob {} > 0", lp.logprob)));
                }
            }
        }
        Ok(())
    }

    pub fn system_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.role == Role::System)
    }

    pub fn replicate_index(&self) -> usize {
        self.generator_meta.as_ref().map_or(0, |m| m.replicate_index)
    }
}

/// Reference answers for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldQA {
    pub question: String,
    pub reference_answers: Vec<String>,
    pub is_unanswerable: bool,
}

/// A human dialogue with one [`GoldQA`] per QA pair; `gold[k]` belongs to the
/// System turn at index `2k + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedDialogue {
    pub dialogue: Dialogue,
    pub gold: Vec<GoldQA>,
}

/// Draws `n` distinct documents, deterministic in `(docs order, n, seed)`.
pub fn sample_documents(docs: &[Document], n: usize, seed: u64) -> Result<Vec<Document>, CorpusError> {
    if n > docs.len() {
        return Err(CorpusError::SampleTooLarge {
            requested: n,
            available: docs.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..docs.len()).collect();
    let (picked, _) = idx.partial_shuffle(&mut rng, n);
    Ok(picked.iter().map(|&i| docs[i].clone()).collect())
}

/// Splits dialogues into `(train, validation)` with
/// `|validation| = round_half_up(ratio * N)`. Both halves keep input order.
pub fn split_validation(
    dialogues: &[Dialogue],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>), CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadRatio(ratio));
    }
    if dialogues.is_empty() {
        return Err(CorpusError::EmptySplit);
    }
    let n_val = ((ratio * dialogues.len() as f64) + 0.5).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..dialogues.len()).collect();
    idx.shuffle(&mut rng);
    let val: HashSet<usize> = idx[..n_val].iter().copied().collect();

    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (i, d) in dialogues.iter().enumerate() {
        if val.contains(&i) {
            validation.push(d.clone());
        } else {
            train.push(d.clone());
        }
    }
    Ok((train, validation))
}
