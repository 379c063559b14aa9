//! Line-delimited JSON dataset files, one dialogue per line.
//!
//! Every record carries `"schema": "autoconv/1"` as its first field. The
//! encoding is canonical: struct fields serialize in declaration order and
//! floats use shortest round-trip formatting, so equal content always yields
//! equal bytes.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::{CorpusError, Dialogue, Document};

pub const SCHEMA_VERSION: &str = "autoconv/1";

#[derive(Serialize)]
struct RecordOut<'a> {
    schema: &'static str,
    #[serde(flatten)]
    dialogue: &'a Dialogue,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Canonical single-line encoding of a dialogue (no trailing newline).
pub fn dialogue_to_line(dialogue: &Dialogue) -> String {
    serde_json::to_string(&RecordOut {
        schema: SCHEMA_VERSION,
        dialogue,
    })
    .expect("dialogue serialization is infallible")
}

pub(crate) fn dialogue_from_line(line: &str, lineno: usize, path: &Path) -> Result<Dialogue, CorpusError> {
    let parse = |message: String| CorpusError::Parse {
        path: path.display().to_string(),
        message: format!("line {lineno}: {message}"),
    };
    let mut value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| parse("record is not an object".into()))?;
    match obj.remove("schema") {
        Some(serde_json::Value::String(s)) if s == SCHEMA_VERSION => {}
        other => {
            return Err(CorpusError::SchemaVersion {
                line: lineno,
                found: other.map(|v| v.as_str().map(str::to_owned).unwrap_or_else(|| v.to_string())),
                expected: SCHEMA_VERSION,
            })
        }
    }
    serde_json::from_value(value).map_err(|e| parse(e.to_string()))
}

pub fn write_dataset(dialogues: &[Dialogue], path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for d in dialogues {
        writeln!(out, "{}", dialogue_to_line(d)).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<Dialogue>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut dialogues = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        dialogues.push(dialogue_from_line(&line, i + 1, path)?);
    }
    Ok(dialogues)
}

/// Custom corpora are stored as one JSON document per line.
pub fn read_documents(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    if text.trim().is_empty() {
        return Err(CorpusError::Empty {
            path: path.display().to_string(),
        });
    }
    let mut docs = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let doc: Document = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?;
        doc.validate()?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents(docs: &[Document], path: &Path) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for d in docs {
        let line = serde_json::to_string(d).expect("document serialization is infallible");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}
