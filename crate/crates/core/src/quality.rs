//! Repetition, diversity and grounding checks over synthetic dialogues.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dialogue, Document, Role, Turn, NO_ANSWER_LITERALS};
use crate::eval::normalize_text;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("dialogue {0} has no turns")]
    EmptyDialogue(String),
    #[error("cannot filter an empty batch")]
    EmptyBatch,
    #[error("keep fraction must lie in (0, 1], got {0}")]
    BadKeepFraction(f64),
    #[error("turn {0} is not a System turn")]
    NotSystemTurn(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    NoAnswer,
    Hallucination,
    LowOverlap,
}

impl Flag {
    pub const ALL: [Flag; 3] = [Flag::NoAnswer, Flag::Hallucination, Flag::LowOverlap];

    pub fn name(self) -> &'static str {
        match self {
            Flag::NoAnswer => "no_answer",
            Flag::Hallucination => "hallucination",
            Flag::LowOverlap => "low_overlap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub rep2: f64,
    pub rep3: f64,
    pub rep4: f64,
    pub diversity: f64,
    /// One entry per System turn, in turn order.
    pub grounding_overlap: Vec<f64>,
    /// One entry per System turn, in turn order.
    pub flags: Vec<BTreeSet<Flag>>,
    pub kept: bool,
}

/// Thresholds on grounding overlap: below `hallucination` is flagged as
/// hallucination, below `low_overlap` as low overlap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityConfig {
    pub hallucination: f64,
    pub low_overlap: f64,
}

impl Default for QualityConfig {
    fn default() -> Self {
        QualityConfig {
            hallucination: 0.5,
            low_overlap: 0.8,
        }
    }
}

/// Percentage of repeated n-grams: `100 * (1 - unique / total)`, or 0 when
/// the sequence is shorter than `n`.
///
/// # Panics
/// If `n == 0`.
pub fn ngram_repetition<T: Eq + Hash>(tokens: &[T], n: usize) -> f64 {
    assert!(n >= 1, "n-gram order must be at least 1");
    if tokens.len() < n {
        return 0.0;
    }
    let total = tokens.len() - n + 1;
    let unique: HashSet<&[T]> = tokens.windows(n).collect();
    100.0 * (1.0 - unique.len() as f64 / total as f64)
}

/// `(rep2, rep3, rep4, product of (1 - rep_n / 100))`.
pub fn repetition_profile<T: Eq + Hash>(tokens: &[T]) -> (f64, f64, f64, f64) {
    let r2 = ngram_repetition(tokens, 2);
    let r3 = ngram_repetition(tokens, 3);
    let r4 = ngram_repetition(tokens, 4);
    let diversity = (1.0 - r2 / 100.0) * (1.0 - r3 / 100.0) * (1.0 - r4 / 100.0);
    (r2, r3, r4, diversity)
}

/// Whitespace tokens of every turn, concatenated in turn order.
pub fn dialogue_tokens(dialogue: &Dialogue) -> Vec<&str> {
    dialogue.turns.iter().flat_map(|t| t.text.split_whitespace()).collect()
}

pub fn diversity_score(dialogue: &Dialogue) -> Result<f64, QualityError> {
    if dialogue.turns.is_empty() {
        return Err(QualityError::EmptyDialogue(dialogue.id.clone()));
    }
    Ok(repetition_profile(&dialogue_tokens(dialogue)).3)
}

/// Fraction of the answer's normalized tokens that occur in the document.
/// An answer that normalizes to nothing counts as fully grounded.
pub fn grounding_overlap(answer_text: &str, document_text: &str) -> f64 {
    overlap_with(answer_text, &document_vocabulary(document_text))
}

fn document_vocabulary(document_text: &str) -> HashSet<String> {
    normalize_text(document_text).into_iter().collect()
}

fn overlap_with(answer_text: &str, vocab: &HashSet<String>) -> f64 {
    let answer = normalize_text(answer_text);
    if answer.is_empty() {
        return 1.0;
    }
    answer.iter().filter(|t| vocab.contains(*t)).count() as f64 / answer.len() as f64
}

fn is_no_answer(text: &str) -> bool {
    let norm = normalize_text(text);
    NO_ANSWER_LITERALS.iter().any(|lit| normalize_text(lit) == norm)
}

fn flags_for(text: &str, overlap: f64, cfg: &QualityConfig) -> BTreeSet<Flag> {
    let mut flags = BTreeSet::new();
    if is_no_answer(text) {
        flags.insert(Flag::NoAnswer);
    } else if overlap < cfg.hallucination {
        flags.insert(Flag::Hallucination);
    } else if overlap < cfg.low_overlap {
        flags.insert(Flag::LowOverlap);
    }
    flags
}

/// Advisory flags for one System answer. No-answer literals are not checked
/// for grounding.
pub fn classify_answer(turn: &Turn, document: &Document, cfg: &QualityConfig) -> Result<BTreeSet<Flag>, QualityError> {
    if turn.role != Role::System {
        return Err(QualityError::NotSystemTurn(turn.index));
    }
    Ok(flags_for(
        &turn.text,
        grounding_overlap(&turn.text, &document.text),
        cfg,
    ))
}

/// Full report for one dialogue; `kept` starts out false.
pub fn assess(dialogue: &Dialogue, document: &Document, cfg: &QualityConfig) -> Result<QualityReport, QualityError> {
    if dialogue.turns.is_empty() {
        return Err(QualityError::EmptyDialogue(dialogue.id.clone()));
    }
    let (rep2, rep3, rep4, diversity) = repetition_profile(&dialogue_tokens(dialogue));
    let vocab = document_vocabulary(&document.text);
    let mut grounding_overlap_v = Vec::new();
    let mut flags = Vec::new();
    for turn in dialogue.system_turns() {
        let overlap = overlap_with(&turn.text, &vocab);
        flags.push(flags_for(&turn.text, overlap, cfg));
        grounding_overlap_v.push(overlap);
    }
    Ok(QualityReport {
        rep2,
        rep3,
        rep4,
        diversity,
        grounding_overlap: grounding_overlap_v,
        flags,
        kept: false,
    })
}

/// Assesses a batch, fanning out over the rayon pool when available.
pub fn assess_batch(items: &[(Dialogue, Document)], cfg: &QualityConfig) -> Vec<Result<QualityReport, QualityError>> {
    crate::par::map(items, |(d, doc)| assess(d, doc, cfg))
}

/// Single-threaded [`assess_batch`].
pub fn assess_batch_seq(
    items: &[(Dialogue, Document)],
    cfg: &QualityConfig,
) -> Vec<Result<QualityReport, QualityError>> {
    crate::par::map_seq(items, |(d, doc)| assess(d, doc, cfg))
}

/// Number of items kept out of `n`: `ceil(keep_fraction * n)`.
pub fn keep_count(keep_fraction: f64, n: usize) -> usize {
    // Absorb float noise such as 0.7 * 10 = 7.000000000000001.
    let raw = keep_fraction * n as f64;
    let nearest = raw.round();
    let k = if (raw - nearest).abs() < 1e-9 {
        nearest
    } else {
        raw.ceil()
    };
    (k as usize).min(n)
}

/// Keeps the `ceil(keep_fraction * N)` most diverse dialogues across the whole
/// batch. Ties are broken by ascending dialogue id. Dialogues without a
/// quality report get a diversity-only one. Both outputs preserve input order
/// and every report's `kept` flag is set accordingly.
pub fn filter_by_diversity(
    mut dialogues: Vec<Dialogue>,
    keep_fraction: f64,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>), QualityError> {
    if dialogues.is_empty() {
        return Err(QualityError::EmptyBatch);
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(QualityError::BadKeepFraction(keep_fraction));
    }
    for d in &mut dialogues {
        if d.quality.is_none() {
            let (rep2, rep3, rep4, diversity) = repetition_profile(&dialogue_tokens(d));
            d.quality = Some(QualityReport {
                rep2,
                rep3,
                rep4,
                diversity,
                grounding_overlap: Vec::new(),
                flags: Vec::new(),
                kept: false,
            });
        }
    }
    let score = |d: &Dialogue| d.quality.as_ref().map_or(0.0, |q| q.diversity);
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    order.sort_by(|&a, &b| {
        score(&dialogues[b])
            .total_cmp(&score(&dialogues[a]))
            .then_with(|| dialogues[a].id.cmp(&dialogues[b].id))
    });
    let k = keep_count(keep_fraction, dialogues.len());
    let mut keep = vec![false; dialogues.len()];
    for &i in &order[..k] {
        keep[i] = true;
    }

    let (mut kept, mut removed) = (Vec::with_capacity(k), Vec::new());
    for (mut d, keep) in dialogues.into_iter().zip(keep) {
        if let Some(q) = d.quality.as_mut() {
            q.kept = keep;
        }
        if keep {
            kept.push(d);
        } else {
            removed.push(d);
        }
    }
    Ok((kept, removed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Ten equal-width bins over `[0, 1]`; the last bin includes 1.0.
    pub histogram: [usize; 10],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub dialogues: usize,
    pub kept: usize,
    pub removed: usize,
    pub unscored: usize,
    pub mean_turns: f64,
    pub diversity: Option<DiversityStats>,
    pub flags: BTreeMap<String, usize>,
}

/// Counts per flag and the diversity distribution of a batch.
pub fn summarize(dialogues: &[Dialogue]) -> BatchSummary {
    let mut flags: BTreeMap<String, usize> = Flag::ALL.iter().map(|f| (f.name().to_owned(), 0)).collect();
    let (mut kept, mut removed, mut unscored) = (0, 0, 0);
    let mut scores = Vec::new();
    for d in dialogues {
        match &d.quality {
            Some(q) => {
                if q.kept {
                    kept += 1;
                } else {
                    removed += 1;
                }
                scores.push(q.diversity);
                for f in q.flags.iter().flatten() {
                    *flags.entry(f.name().to_owned()).or_default() += 1;
                }
            }
            None => unscored += 1,
        }
    }
    let diversity = (!scores.is_empty()).then(|| {
        let mut histogram = [0usize; 10];
        for &s in &scores {
            histogram[((s * 10.0).floor().max(0.0) as usize).min(9)] += 1;
        }
        DiversityStats {
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            histogram,
        }
    });
    let total_turns: usize = dialogues.iter().map(|d| d.turns.len()).sum();
    BatchSummary {
        dialogues: dialogues.len(),
        kept,
        removed,
        unscored,
        mean_turns: if dialogues.is_empty() {
            0.0
        } else {
            total_turns as f64 / dialogues.len() as f64
        },
        diversity,
        flags,
    }
}
