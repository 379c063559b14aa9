mod common;

use std::collections::HashSet;
use std::fs;
use std::sync::Arc;

use autoconv::backend::{BackendError, Client, CompletionBackend, ScriptedBackend};
use autoconv::corpus::{read_dataset, Role};
use autoconv::pipeline::{
    run, run_documents, PipelineError, RunOptions, RunReport, CHECKPOINT_FILE, KEPT_FILE, REMOVED_FILE, REPORT_FILE,
};

use common::{documents, echo_client, manifest, retry};

fn fresh() -> RunOptions {
    RunOptions::default()
}

#[test]
fn two_documents_eight_replicates() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 4);
    let (client, _) = echo_client(None);
    let report = run(&m, &client, &fresh()).unwrap();
    assert_eq!(report.planned, 16);
    assert_eq!(report.generated, 16);
    assert_eq!(report.kept, 12);
    assert_eq!(report.removed, 4);
    assert_eq!(report.kept + report.removed, report.generated);
    assert_eq!(report.failed, 0);

    let kept = read_dataset(&m.output_dir.join(KEPT_FILE)).unwrap();
    let removed = read_dataset(&m.output_dir.join(REMOVED_FILE)).unwrap();
    assert_eq!(kept.len(), 12);
    let min_kept = kept
        .iter()
        .map(|d| d.quality.as_ref().unwrap().diversity)
        .fold(f64::INFINITY, f64::min);
    let max_removed = removed
        .iter()
        .map(|d| d.quality.as_ref().unwrap().diversity)
        .fold(0.0, f64::max);
    assert!(min_kept >= max_removed);
    for d in kept.iter().chain(&removed) {
        d.validate().unwrap();
        assert!(d.turns.len() <= 14);
        assert_eq!(d.turns[0].role, Role::User);
        assert_eq!(d.generator_meta.as_ref().unwrap().manifest_id, "robust");
    }
    let on_disk: RunReport =
        serde_json::from_str(&fs::read_to_string(m.output_dir.join(REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, report);
}

#[test]
fn runs_are_byte_identical_across_concurrency() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = manifest(a.path(), 1);
    let mb = manifest(b.path(), 6);
    run(&ma, &echo_client(None).0, &fresh()).unwrap();
    run(&mb, &echo_client(None).0, &fresh()).unwrap();
    for f in [KEPT_FILE, REMOVED_FILE] {
        assert_eq!(
            fs::read(ma.output_dir.join(f)).unwrap(),
            fs::read(mb.output_dir.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn transient_failures_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 4);
    let (client, backend) = echo_client(Some(10));
    let report = run(&m, &client, &fresh()).unwrap();
    assert_eq!(report.failed, 0);
    assert_eq!(report.generated, 16);
    let all: Vec<_> = read_dataset(&m.output_dir.join(KEPT_FILE))
        .unwrap()
        .into_iter()
        .chain(read_dataset(&m.output_dir.join(REMOVED_FILE)).unwrap())
        .collect();
    let ids: HashSet<_> = all.iter().map(|d| d.id.clone()).collect();
    assert_eq!(ids.len(), 16);
    let pairs: HashSet<_> = all.iter().map(|d| (d.doc_id.clone(), d.replicate_index())).collect();
    assert_eq!(pairs.len(), 16);
    assert!(backend.recorded().len() > 100);

    // same bytes as a run without failures
    let clean = tempfile::tempdir().unwrap();
    let mc = manifest(clean.path(), 4);
    run(&mc, &echo_client(None).0, &fresh()).unwrap();
    assert_eq!(
        fs::read(m.output_dir.join(KEPT_FILE)).unwrap(),
        fs::read(mc.output_dir.join(KEPT_FILE)).unwrap()
    );
}

#[test]
fn exhausted_retries_drop_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 2);
    let echo = ScriptedBackend::document_echo("echo");
    let flaky = ScriptedBackend::responder("echo", move |prompt, config| {
        if prompt.contains("Holy See") && prompt.matches("\nSystem:").count() >= 3 {
            Err(BackendError::Status {
                status: 503,
                body: "down".into(),
            })
        } else {
            echo.send(prompt, config)
        }
    });
    let client = Client::new(Arc::new(flaky), retry(2));
    let report = run(&m, &client, &fresh()).unwrap();
    assert_eq!(report.failed, 8);
    assert_eq!(report.generated, 8);
    assert_eq!(report.kept, 6);
    assert!(report.failures.iter().all(|f| f.doc_id == "doc-library"));
}

#[test]
fn kill_and_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 3);
    match run(
        &m,
        &echo_client(None).0,
        &RunOptions {
            resume: false,
            stop_after: Some(5),
        },
    ) {
        Err(PipelineError::Interrupted { completed }) => assert_eq!(completed, 5),
        other => panic!("unexpected {other:?}"),
    }
    assert!(!m.output_dir.join(KEPT_FILE).exists());
    let report = run(
        &m,
        &echo_client(None).0,
        &RunOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(report.resumed, 5);
    assert_eq!(report.generated, 16);

    let clean = tempfile::tempdir().unwrap();
    let mc = manifest(clean.path(), 3);
    run(&mc, &echo_client(None).0, &fresh()).unwrap();
    assert_eq!(
        fs::read(m.output_dir.join(KEPT_FILE)).unwrap(),
        fs::read(mc.output_dir.join(KEPT_FILE)).unwrap()
    );
    assert_eq!(
        fs::read(m.output_dir.join(REMOVED_FILE)).unwrap(),
        fs::read(mc.output_dir.join(REMOVED_FILE)).unwrap()
    );
    let ids: Vec<_> = read_dataset(&m.output_dir.join(KEPT_FILE))
        .unwrap()
        .into_iter()
        .map(|d| d.id)
        .collect();
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
}

#[test]
fn existing_checkpoint_requires_resume() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 2);
    let _ = run(
        &m,
        &echo_client(None).0,
        &RunOptions {
            resume: false,
            stop_after: Some(2),
        },
    );
    assert!(matches!(
        run(&m, &echo_client(None).0, &fresh()),
        Err(PipelineError::CheckpointExists(_))
    ));
}

#[test]
fn corrupted_checkpoint_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 2);
    let _ = run(
        &m,
        &echo_client(None).0,
        &RunOptions {
            resume: false,
            stop_after: Some(4),
        },
    );
    let generated = m.output_dir.join("generated.jsonl");
    let text = fs::read_to_string(&generated).unwrap();
    fs::write(&generated, text.replacen("User", "Usr", 1)).unwrap();
    let resumed = run(
        &m,
        &echo_client(None).0,
        &RunOptions {
            resume: true,
            stop_after: None,
        },
    );
    assert!(
        matches!(resumed, Err(PipelineError::CorruptCheckpoint(_))),
        "{resumed:?}"
    );

    let checkpoint = m.output_dir.join(CHECKPOINT_FILE);
    fs::write(&generated, text).unwrap();
    let ck = fs::read_to_string(&checkpoint).unwrap();
    fs::write(&checkpoint, ck.replace("\"robust\"", "\"other\"")).unwrap();
    assert!(matches!(
        run(
            &m,
            &echo_client(None).0,
            &RunOptions {
                resume: true,
                stop_after: None
            }
        ),
        Err(PipelineError::CorruptCheckpoint(_))
    ));
    fs::write(&checkpoint, "{not json\n").unwrap();
    assert!(matches!(
        run(
            &m,
            &echo_client(None).0,
            &RunOptions {
                resume: true,
                stop_after: None
            }
        ),
        Err(PipelineError::CorruptCheckpoint(_))
    ));
}

#[test]
fn fatal_error_keeps_partial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest(dir.path(), 1);
    let echo = ScriptedBackend::document_echo("echo");
    let broken = ScriptedBackend::responder("echo", move |prompt, config| {
        if prompt.contains("Holy See") {
            Err(BackendError::Status {
                status: 400,
                body: "bad request".into(),
            })
        } else {
            echo.send(prompt, config)
        }
    });
    let client = Client::new(Arc::new(broken), retry(3));
    let err = run_documents(&m, &documents(), &client, &fresh()).unwrap_err();
    assert!(matches!(err, PipelineError::Generation(_)), "{err:?}");
    assert!(!m.output_dir.join(KEPT_FILE).exists());
    let checkpoint = fs::read_to_string(m.output_dir.join(CHECKPOINT_FILE)).unwrap();
    assert!(checkpoint.lines().all(|l| l.contains("doc-ciara")));

    // resuming with a working backend finishes the job
    let report = run_documents(
        &m,
        &documents(),
        &echo_client(None).0,
        &RunOptions {
            resume: true,
            stop_after: None,
        },
    )
    .unwrap();
    assert_eq!(report.resumed, checkpoint.lines().count());
    assert_eq!(report.generated, 16);
}
