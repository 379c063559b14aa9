#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use autoconv::backend::{Client, RetryPolicy, ScriptedBackend};
use autoconv::corpus::{write_documents, Document, Source};
use autoconv::pipeline::{plan_from_str, JobManifest, Overrides};

pub fn documents() -> Vec<Document> {
    vec![
        Document {
            id: "doc-ciara".into(),
            title: "Ciara".into(),
            section_title: Some("The Evolution".into()),
            text: "On December 5, 2006, Ciara released her second studio album, Ciara: The Evolution. \
                   The album debuted at number one on the Billboard 200. \
                   It sold 338,000 copies in its first week. \
                   Ciara made her acting debut in the film All You've Got in October 2006. \
                   She later toured across North America with Chris Brown."
                .into(),
            source: Source::Custom,
        },
        Document {
            id: "doc-library".into(),
            title: "Vatican Library".into(),
            section_title: None,
            text: "The Vatican Library is the library of the Holy See. \
                   It was formally established in 1475, although it is much older. \
                   It holds 75,000 codices from throughout history. \
                   Scholars have traditionally divided its history into five periods. \
                   The library is open to anyone who can document their qualifications."
                .into(),
            source: Source::Custom,
        },
    ]
}

pub fn retry(max_attempts: u32) -> RetryPolicy {
    RetryPolicy {
        max_attempts,
        base_backoff_ms: 0,
        jitter: 0.0,
    }
}

pub fn echo_client(fail_every: Option<usize>) -> (Client, Arc<ScriptedBackend>) {
    let mut backend = ScriptedBackend::document_echo("echo");
    if let Some(n) = fail_every {
        backend = backend.with_transient_failures(n);
    }
    let backend = Arc::new(backend);
    (Client::new(backend.clone(), retry(3)), backend)
}

/// Writes the two-document corpus and a config pointing at it, then plans.
pub fn manifest(dir: &Path, concurrency: usize) -> JobManifest {
    write_documents(&documents(), &dir.join("docs.jsonl")).unwrap();
    let config = format!(
        r#"
schema = "autoconv-config/1"
id = "robust"
dataset = "custom"
corpus_path = "docs.jsonl"
output_dir = "out"
n_documents = 2
dialogues_per_doc = 8
keep_fraction = 0.75
seed = 7
concurrency = {concurrency}

[backend]
endpoint = "scripted:echo"
model = "echo"
max_attempts = 3
base_backoff_ms = 0
jitter = 0.0
"#
    );
    std::fs::write(dir.join("job.toml"), &config).unwrap();
    plan_from_str(&config, dir, &Overrides::default()).unwrap()
}
