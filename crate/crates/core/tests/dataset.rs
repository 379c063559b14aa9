use std::collections::BTreeSet;

use autoconv::backend::DecodingConfig;
use autoconv::corpus::{
    load_gold, read_dataset, write_dataset, CorpusError, Dialogue, GeneratorMeta, Origin, Role, TokenLogprob, Turn,
};
use autoconv::quality::{Flag, QualityReport};
use proptest::prelude::*;

fn synthetic(id: &str, replicate: usize) -> Dialogue {
    let mut q = Turn::human(0, Role::User, "What was the evolution?");
    q.decoding = Some(
        DecodingConfig::nucleus(0.9, 64)
            .with_seed(99)
            .with_stops(["\nUser:", "\nSystem:"]),
    );
    q.token_logprobs = Some(vec![
        TokenLogprob {
            token: " What".into(),
            logprob: -0.125,
        },
        TokenLogprob {
            token: " was".into(),
            logprob: -1.0 / 3.0,
        },
    ]);
    let mut a = Turn::human(1, Role::System, "Her second studio album.");
    a.decoding = Some(DecodingConfig::greedy(128));
    Dialogue {
        id: id.into(),
        doc_id: "C_ciara_0".into(),
        origin: Origin::Synthetic,
        turns: vec![q, a],
        quality: Some(QualityReport {
            rep2: 0.0,
            rep3: 0.0,
            rep4: 0.0,
            diversity: 1.0,
            grounding_overlap: vec![0.1 + 0.2],
            flags: vec![BTreeSet::from([Flag::Hallucination])],
            kept: true,
        }),
        generator_meta: Some(GeneratorMeta {
            model_id: "opt-13b".into(),
            seed: u64::MAX,
            manifest_id: "m".into(),
            replicate_index: replicate,
        }),
    }
}

#[test]
fn round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let mut human = synthetic("h", 0);
    human.origin = Origin::Human;
    human.quality = None;
    human.generator_meta = None;
    let data = vec![synthetic("a", 0), synthetic("b", 1), human];
    write_dataset(&data, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
}

#[test]
fn writes_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = vec![synthetic("a", 0), synthetic("b", 1)];
    write_dataset(&data, &dir.path().join("1.jsonl")).unwrap();
    write_dataset(&data, &dir.path().join("2.jsonl")).unwrap();
    assert_eq!(
        std::fs::read(dir.path().join("1.jsonl")).unwrap(),
        std::fs::read(dir.path().join("2.jsonl")).unwrap()
    );
}

#[test]
fn record_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&[synthetic("a", 0)], &path).unwrap();
    let line = std::fs::read_to_string(&path).unwrap();
    assert!(line.starts_with(
        r#"{"schema":"autoconv/1","id":"a","doc_id":"C_ciara_0","origin":"synthetic","turns":[{"index":0,"role":"user""#
    ));
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    for k in ["schema", "id", "doc_id", "origin", "turns", "quality", "generator_meta"] {
        assert!(keys.contains(&k.to_string()), "{k}");
    }
    assert!(v["turns"][0]["logprobs"].is_array());
    assert_eq!(v["turns"][0]["decoding"]["strategy"], "nucleus");
    assert!(v["turns"][1].get("logprobs").is_none());
}

#[test]
fn unknown_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&[synthetic("a", 0)], &path).unwrap();
    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("autoconv/1", "autoconv/7");
    std::fs::write(&path, text).unwrap();
    match read_dataset(&path) {
        Err(CorpusError::SchemaVersion { found, line, .. }) => {
            assert_eq!(found.as_deref(), Some("autoconv/7"));
            assert_eq!(line, 1);
        }
        other => panic!("unexpected {other:?}"),
    }
    std::fs::write(&path, r#"{"id":"x"}"#).unwrap();
    assert!(matches!(
        read_dataset(&path),
        Err(CorpusError::SchemaVersion { found: None, .. })
    ));
}

#[test]
fn dataset_files_work_as_gold() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    write_dataset(&[synthetic("a", 0)], &path).unwrap();
    let gold = load_gold(&path).unwrap();
    assert_eq!(gold[0].gold.len(), 1);
    assert_eq!(gold[0].gold[0].reference_answers, vec!["Her second studio album."]);
}

proptest! {
    #[test]
    fn arbitrary_text_and_floats_round_trip(
        texts in prop::collection::vec("\\PC{1,40}", 2..8),
        lps in prop::collection::vec(-50.0f64..=0.0, 1..5),
        diversity in 0.0f64..=1.0,
    ) {
        let turns: Vec<Turn> = texts.iter().enumerate().map(|(i, t)| {
            let mut turn = Turn::human(i, Role::at(i), t.clone());
            turn.token_logprobs = Some(lps.iter().map(|&logprob| TokenLogprob { token: t.clone(), logprob }).collect());
            turn
        }).collect();
        let mut d = synthetic("p", 3);
        d.turns = turns;
        d.quality.as_mut().unwrap().diversity = diversity;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_dataset(std::slice::from_ref(&d), &path).unwrap();
        prop_assert_eq!(read_dataset(&path).unwrap(), vec![d]);
    }
}
