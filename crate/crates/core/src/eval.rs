//! Word-level F1 and Exact Match for conversational QA.
//!
//! Normalization follows the SQuAD/QuAC evaluation scripts: lowercase,
//! drop punctuation, drop the articles `a`, `an`, `the`, split on
//! whitespace. Scores against several references take the maximum.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AnnotatedDialogue;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference list is empty")]
    NoReferences,
    #[error("missing prediction for dialogue {dialogue_id} turn {turn_index}")]
    MissingPrediction { dialogue_id: String, turn_index: usize },
    #[error("duplicate prediction for dialogue {dialogue_id} turn {turn_index}")]
    DuplicatePrediction { dialogue_id: String, turn_index: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// A model answer for the System turn `turn_index` of a gold dialogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub id: String,
    pub f1: f64,
    pub em: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub f1: f64,
    pub em: f64,
    pub n_questions: usize,
    pub per_question: Vec<QuestionScore>,
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201c}'
                | '\u{201d}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
                | '\u{00ab}'
                | '\u{00bb}'
                | '\u{00bf}'
                | '\u{00a1}'
        )
}

pub fn normalize_text(s: &str) -> Vec<String> {
    let cleaned: String = s.to_lowercase().chars().filter(|&c| !is_punctuation(c)).collect();
    cleaned
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .map(str::to_owned)
        .collect()
}

/// Token-multiset F1 in `[0, 1]`. Two empty normalizations agree (1.0); one
/// empty side scores 0.0.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    f1_tokens(&normalize_text(pred), &normalize_text(gold))
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    // Harmonic mean of precision and recall, 2PR/(P+R), in one division.
    (2 * overlap) as f64 / (pred.len() + gold.len()) as f64
}

/// 1.0 iff the normalized token sequence equals that of any reference.
pub fn exact_match(pred: &str, golds: &[String]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let p = normalize_text(pred);
    Ok(if golds.iter().any(|g| normalize_text(g) == p) {
        1.0
    } else {
        0.0
    })
}

pub fn max_f1(pred: &str, golds: &[String]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let p = normalize_text(pred);
    Ok(golds
        .iter()
        .map(|g| f1_tokens(&p, &normalize_text(g)))
        .fold(0.0, f64::max))
}

/// Scores every gold question, in gold order. Each prediction is keyed by
/// `(dialogue id, System turn index)`.
pub fn evaluate(predictions: &[Prediction], gold: &[AnnotatedDialogue]) -> Result<EvalResult, EvalError> {
    let mut by_key: HashMap<(&str, usize), &str> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_key.insert((&p.dialogue_id, p.turn_index), &p.text).is_some() {
            return Err(EvalError::DuplicatePrediction {
                dialogue_id: p.dialogue_id.clone(),
                turn_index: p.turn_index,
            });
        }
    }

    let mut jobs = Vec::new();
    for ad in gold {
        for (k, qa) in ad.gold.iter().enumerate() {
            let turn_index = 2 * k + 1;
            let text =
                by_key
                    .get(&(ad.dialogue.id.as_str(), turn_index))
                    .ok_or_else(|| EvalError::MissingPrediction {
                        dialogue_id: ad.dialogue.id.clone(),
                        turn_index,
                    })?;
            if qa.reference_answers.is_empty() {
                return Err(EvalError::NoReferences);
            }
            jobs.push((format!("{}#{turn_index}", ad.dialogue.id), *text, &qa.reference_answers));
        }
    }

    let per_question: Vec<QuestionScore> = crate::par::map(&jobs, |(id, text, refs)| QuestionScore {
        id: id.clone(),
        f1: max_f1(text, refs).expect("references checked non-empty"),
        em: exact_match(text, refs).expect("references checked non-empty"),
    });
    let n = per_question.len();
    let mean = |f: fn(&QuestionScore) -> f64| {
        if n == 0 {
            0.0
        } else {
            100.0 * per_question.iter().map(f).sum::<f64>() / n as f64
        }
    };
    Ok(EvalResult {
        f1: mean(|q| q.f1),
        em: mean(|q| q.em),
        n_questions: n,
        per_question,
    })
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: Prediction = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert((p.dialogue_id.clone(), p.turn_index)) {
            return Err(EvalError::DuplicatePrediction {
                dialogue_id: p.dialogue_id,
                turn_index: p.turn_index,
            });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_predictions(predictions: &[Prediction], path: &Path) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(fs::File::create(path).map_err(io)?);
    for p in predictions {
        writeln!(out, "{}", serde_json::to_string(p).expect("prediction serializes")).map_err(io)?;
    }
    out.flush().map_err(io)
}
