//! Readers for the QuAC and CoQA release files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::dataset::dialogue_from_line;
use super::{AnnotatedDialogue, CorpusError, Dialogue, Document, GoldQA, Origin, Role, Source, Turn};

pub const QUAC_NO_ANSWER: &str = "CANNOTANSWER";
pub const COQA_NO_ANSWER: &str = "unknown";

#[derive(Deserialize)]
struct QuacFile {
    data: Vec<QuacArticle>,
}

#[derive(Deserialize)]
struct QuacArticle {
    #[serde(default)]
    title: String,
    #[serde(default)]
    section_title: Option<String>,
    paragraphs: Vec<QuacParagraph>,
}

#[derive(Deserialize)]
struct QuacParagraph {
    id: String,
    context: String,
    qas: Vec<QuacQa>,
}

// followup / yesno annotations are present in the release but unused.
#[derive(Deserialize)]
struct QuacQa {
    id: String,
    question: String,
    #[serde(default)]
    answers: Vec<QuacAnswer>,
    #[serde(default)]
    orig_answer: Option<QuacAnswer>,
}

#[derive(Deserialize)]
struct QuacAnswer {
    text: String,
}

#[derive(Deserialize)]
struct CoqaFile {
    data: Vec<CoqaStory>,
}

#[derive(Deserialize)]
struct CoqaStory {
    id: String,
    #[serde(default)]
    source: Option<String>,
    #[serde(default)]
    filename: Option<String>,
    story: String,
    questions: Vec<CoqaUtterance>,
    answers: Vec<CoqaUtterance>,
    #[serde(default)]
    additional_answers: BTreeMap<String, Vec<CoqaUtterance>>,
}

#[derive(Deserialize)]
struct CoqaUtterance {
    input_text: String,
    turn_id: usize,
}

fn read_nonempty(path: &Path) -> Result<String, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if text.trim().is_empty() {
        return Err(CorpusError::Empty {
            path: path.display().to_string(),
        });
    }
    Ok(text)
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<T, CorpusError> {
    serde_json::from_str(text).map_err(|e| CorpusError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn invalid(record: &str, message: impl Into<String>) -> CorpusError {
    CorpusError::InvalidRecord {
        record: record.to_owned(),
        message: message.into(),
    }
}

fn build_dialogue(id: String, doc_id: String, pairs: &[(String, String)]) -> Dialogue {
    let mut turns = Vec::with_capacity(pairs.len() * 2);
    for (q, a) in pairs {
        let i = turns.len();
        turns.push(Turn::human(i, Role::User, q.trim()));
        turns.push(Turn::human(i + 1, Role::System, a.trim()));
    }
    Dialogue {
        id,
        doc_id,
        origin: Origin::Human,
        turns,
        quality: None,
        generator_meta: None,
    }
}

/// One document per context paragraph and one dialogue per paragraph.
pub fn ingest_quac(path: &Path) -> Result<(Vec<Document>, Vec<AnnotatedDialogue>), CorpusError> {
    let text = read_nonempty(path)?;
    let file: QuacFile = parse(&text, path)?;
    let mut docs = Vec::new();
    let mut dialogues = Vec::new();

    for article in file.data {
        for para in article.paragraphs {
            // The release appends the no-answer literal to every context.
            let context = para.context.trim();
            let context = context.strip_suffix(QUAC_NO_ANSWER).unwrap_or(context).trim_end();
            if context.is_empty() {
                return Err(invalid(&para.id, "empty context"));
            }
            docs.push(Document {
                id: para.id.clone(),
                title: article.title.clone(),
                section_title: article.section_title.clone(),
                text: context.to_owned(),
                source: Source::Quac,
            });

            let mut pairs = Vec::with_capacity(para.qas.len());
            let mut gold = Vec::with_capacity(para.qas.len());
            for qa in &para.qas {
                let mut refs: Vec<String> = qa.answers.iter().map(|a| a.text.trim().to_owned()).collect();
                let primary = match (&qa.orig_answer, refs.first()) {
                    (Some(orig), _) => orig.text.trim().to_owned(),
                    (None, Some(first)) => first.clone(),
                    (None, None) => return Err(invalid(&qa.id, "question has no answers")),
                };
                if refs.is_empty() {
                    refs.push(primary.clone());
                }
                if qa.question.trim().is_empty() || primary.is_empty() {
                    return Err(invalid(&qa.id, "empty question or answer"));
                }
                let is_unanswerable = primary == QUAC_NO_ANSWER || refs.iter().any(|r| r == QUAC_NO_ANSWER);
                if is_unanswerable && !refs.iter().any(|r| r == QUAC_NO_ANSWER) {
                    refs.push(QUAC_NO_ANSWER.to_owned());
                }
                pairs.push((qa.question.clone(), primary));
                gold.push(GoldQA {
                    question: qa.question.trim().to_owned(),
                    reference_answers: refs,
                    is_unanswerable,
                });
            }
            if pairs.is_empty() {
                return Err(invalid(&para.id, "paragraph has no questions"));
            }
            dialogues.push(AnnotatedDialogue {
                dialogue: build_dialogue(para.id.clone(), para.id, &pairs),
                gold,
            });
        }
    }
    if docs.is_empty() {
        return Err(CorpusError::Empty {
            path: path.display().to_string(),
        });
    }
    Ok((docs, dialogues))
}

/// One document and one dialogue per story.
pub fn ingest_coqa(path: &Path) -> Result<(Vec<Document>, Vec<AnnotatedDialogue>), CorpusError> {
    let text = read_nonempty(path)?;
    let file: CoqaFile = parse(&text, path)?;
    let mut docs = Vec::new();
    let mut dialogues = Vec::new();

    for story in file.data {
        if story.story.trim().is_empty() {
            return Err(invalid(&story.id, "empty story text"));
        }
        if story.questions.len() != story.answers.len() {
            return Err(invalid(
                &story.id,
                format!(
                    "{} questions but {} answers",
                    story.questions.len(),
                    story.answers.len()
                ),
            ));
        }
        docs.push(Document {
            id: story.id.clone(),
            title: story.filename.clone().unwrap_or_else(|| story.id.clone()),
            section_title: story.source.clone(),
            text: story.story.trim().to_owned(),
            source: Source::Coqa,
        });

        let mut pairs = Vec::new();
        let mut gold = Vec::new();
        for (q, a) in story.questions.iter().zip(&story.answers) {
            if q.turn_id != a.turn_id {
                return Err(invalid(
                    &story.id,
                    format!("turn id mismatch {} vs {}", q.turn_id, a.turn_id),
                ));
            }
            let answer = a.input_text.trim().to_owned();
            if q.input_text.trim().is_empty() || answer.is_empty() {
                return Err(invalid(
                    &story.id,
                    format!("turn {} has an empty question or answer", q.turn_id),
                ));
            }
            let mut refs = vec![answer.clone()];
            for extra in story.additional_answers.values() {
                if let Some(alt) = extra.iter().find(|x| x.turn_id == a.turn_id) {
                    refs.push(alt.input_text.trim().to_owned());
                }
            }
            let is_unanswerable = refs.iter().any(|r| r.eq_ignore_ascii_case(COQA_NO_ANSWER));
            pairs.push((q.input_text.clone(), answer));
            gold.push(GoldQA {
                question: q.input_text.trim().to_owned(),
                reference_answers: refs,
                is_unanswerable,
            });
        }
        if pairs.is_empty() {
            return Err(invalid(&story.id, "story has no questions"));
        }
        dialogues.push(AnnotatedDialogue {
            dialogue: build_dialogue(story.id.clone(), story.id, &pairs),
            gold,
        });
    }
    if docs.is_empty() {
        return Err(CorpusError::Empty {
            path: path.display().to_string(),
        });
    }
    Ok((docs, dialogues))
}

/// Loads gold dialogues for evaluation from a QuAC file, a CoQA file, or an
/// `autoconv/1` dataset (each System turn becomes a single reference).
pub fn load_gold(path: &Path) -> Result<Vec<AnnotatedDialogue>, CorpusError> {
    let text = read_nonempty(path)?;
    let first = text.trim_start();
    if first.starts_with('{') {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
            let sample = value.get("data").and_then(|d| d.get(0));
            if sample.is_some_and(|s| s.get("paragraphs").is_some()) {
                return ingest_quac(path).map(|(_, d)| d);
            }
            if sample.is_some_and(|s| s.get("story").is_some()) {
                return ingest_coqa(path).map(|(_, d)| d);
            }
        }
    }
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let dialogue = dialogue_from_line(line, i + 1, path)?;
        dialogue.validate()?;
        let gold = dialogue
            .turns
            .chunks(2)
            .filter(|pair| pair.len() == 2)
            .map(|pair| GoldQA {
                question: pair[0].text.clone(),
                reference_answers: vec![pair[1].text.clone()],
                is_unanswerable: super::NO_ANSWER_LITERALS
                    .iter()
                    .any(|lit| pair[1].text.eq_ignore_ascii_case(lit)),
            })
            .collect();
        out.push(AnnotatedDialogue { dialogue, gold });
    }
    Ok(out)
}
