//! Concurrent, checkpointed generation runs.
//!
//! Workers generate and assess dialogues independently; a single coordinator
//! owns every file handle. After each finished `(document, replicate)` pair
//! the coordinator appends the dialogue to `generated.jsonl`, then a record
//! `(doc_id, replicate, status, sha256 of that line)` to `checkpoint.log`.
//! A resumed run skips checkpointed pairs and verifies every hash before
//! trusting the stored dialogue. Final outputs are sorted by
//! `(doc_id, replicate)`, so they do not depend on scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{JobManifest, PipelineError};
use crate::backend::{BackendError, Client};
use crate::corpus::{self, dialogue_to_line, write_dataset, Dialogue, Document, Source};
use crate::generator::{generate_dialogue, GenerationError};
use crate::quality::{self, assess, filter_by_diversity, Flag};

pub const KEPT_FILE: &str = "kept.jsonl";
pub const REMOVED_FILE: &str = "removed.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.log";
pub const GENERATED_FILE: &str = "generated.jsonl";

#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub kept: PathBuf,
    pub removed: PathBuf,
    pub report: PathBuf,
    pub checkpoint: PathBuf,
    pub generated: PathBuf,
}

impl OutputPaths {
    pub fn new(dir: &Path) -> Self {
        OutputPaths {
            kept: dir.join(KEPT_FILE),
            removed: dir.join(REMOVED_FILE),
            report: dir.join(REPORT_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
            generated: dir.join(GENERATED_FILE),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: bool,
    /// Stop after this many newly checkpointed pairs, as if the process had
    /// been killed. Used to exercise resume.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub doc_id: String,
    pub replicate: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest_id: String,
    pub planned: usize,
    /// Dialogues emitted into `kept` or `removed`.
    pub generated: usize,
    /// Pairs dropped after exhausting retries.
    pub failed: usize,
    /// Dialogues that ended before their first answer.
    pub discarded: usize,
    pub kept: usize,
    pub removed: usize,
    /// Pairs restored from the checkpoint rather than generated in this run.
    pub resumed: usize,
    pub flags: BTreeMap<String, usize>,
    pub failures: Vec<FailureRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Status {
    Ok,
    Discarded,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointRecord {
    manifest_id: String,
    doc_id: String,
    replicate: usize,
    status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hash: Option<String>,
}

type Key = (String, usize);

enum Outcome {
    Done(Box<Dialogue>),
    Discarded,
    Failed(String),
    Fatal(PipelineError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads the document pool for a dataset kind.
pub fn load_corpus(dataset: Source, path: &Path) -> Result<Vec<Document>, PipelineError> {
    Ok(match dataset {
        Source::Quac => corpus::ingest_quac(path)?.0,
        Source::Coqa => corpus::ingest_coqa(path)?.0,
        Source::Custom => corpus::read_documents(path)?,
    })
}

/// Loads the corpus, samples `n_documents` with the manifest seed and runs.
pub fn run(manifest: &JobManifest, client: &Client, opts: &RunOptions) -> Result<RunReport, PipelineError> {
    let pool = load_corpus(manifest.dataset, &manifest.corpus_path)?;
    let docs = corpus::sample_documents(&pool, manifest.n_documents, manifest.seed)?;
    run_documents(manifest, &docs, client, opts)
}

fn load_checkpoint(paths: &OutputPaths, manifest_id: &str) -> Result<HashMap<Key, Option<Dialogue>>, PipelineError> {
    let mut done = HashMap::new();
    if !paths.checkpoint.exists() {
        return Ok(done);
    }
    let mut by_hash: HashMap<String, String> = HashMap::new();
    if paths.generated.exists() {
        let f = File::open(&paths.generated).map_err(io_err(&paths.generated))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(io_err(&paths.generated))?;
            by_hash.insert(sha256_hex(line.as_bytes()), line);
        }
    }
    let f = File::open(&paths.checkpoint).map_err(io_err(&paths.checkpoint))?;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(&paths.checkpoint))?;
        let corrupt = |msg: String| PipelineError::CorruptCheckpoint(format!("line {}: {msg}", i + 1));
        let rec: CheckpointRecord = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if rec.manifest_id != manifest_id {
            return Err(corrupt(format!("belongs to manifest {:?}", rec.manifest_id)));
        }
        let entry = match (rec.status, rec.hash) {
            (Status::Discarded, _) => None,
            (Status::Ok, None) => return Err(corrupt("missing hash".into())),
            (Status::Ok, Some(hash)) => {
                let stored = by_hash
                    .get(&hash)
                    .ok_or_else(|| corrupt(format!("no generated dialogue with hash {hash}")))?;
                let d = corpus::dialogue_from_line(stored, 0, &paths.generated).map_err(|e| corrupt(e.to_string()))?;
                if d.doc_id != rec.doc_id || d.replicate_index() != rec.replicate {
                    return Err(corrupt("hash points at a different dialogue".into()));
                }
                Some(d)
            }
        };
        done.insert((rec.doc_id, rec.replicate), entry);
    }
    Ok(done)
}

struct Coordinator<'a> {
    manifest_id: &'a str,
    paths: &'a OutputPaths,
    checkpoint: File,
    generated: File,
    done: HashMap<Key, Option<Dialogue>>,
    failures: Vec<FailureRecord>,
    fatal: Option<PipelineError>,
    written: usize,
}

impl Coordinator<'_> {
    fn accept(&mut self, key: Key, outcome: Outcome) -> Result<(), PipelineError> {
        let (status, hash, dialogue) = match outcome {
            Outcome::Done(d) => {
                let line = dialogue_to_line(&d);
                writeln!(self.generated, "{line}").map_err(io_err(&self.paths.generated))?;
                self.generated.flush().map_err(io_err(&self.paths.generated))?;
                (Status::Ok, Some(sha256_hex(line.as_bytes())), Some(*d))
            }
            Outcome::Discarded => (Status::Discarded, None, None),
            Outcome::Failed(error) => {
                self.failures.push(FailureRecord {
                    doc_id: key.0,
                    replicate: key.1,
                    error,
                });
                return Ok(());
            }
            Outcome::Fatal(e) => {
                if self.fatal.is_none() {
                    self.fatal = Some(e);
                }
                return Ok(());
            }
        };
        let rec = CheckpointRecord {
            manifest_id: self.manifest_id.to_owned(),
            doc_id: key.0.clone(),
            replicate: key.1,
            status,
            hash,
        };
        let line = serde_json::to_string(&rec).expect("checkpoint record serializes");
        writeln!(self.checkpoint, "{line}").map_err(io_err(&self.paths.checkpoint))?;
        self.checkpoint.flush().map_err(io_err(&self.paths.checkpoint))?;
        self.done.insert(key, dialogue);
        self.written += 1;
        Ok(())
    }
}

fn generate_one(client: &Client, manifest: &JobManifest, doc: &Document, replicate: usize) -> Outcome {
    let mut params = manifest.params.clone();
    params.replicate_index = replicate;
    match generate_dialogue(client, doc, &params, &manifest.id) {
        Ok(mut d) => {
            if d.system_turns().next().is_none() {
                return Outcome::Discarded;
            }
            match assess(&d, doc, &manifest.quality) {
                Ok(q) => {
                    d.quality = Some(q);
                    Outcome::Done(Box::new(d))
                }
                Err(e) => Outcome::Fatal(e.into()),
            }
        }
        Err(
            e @ GenerationError::Backend {
                source: BackendError::Exhausted { .. },
                ..
            },
        ) => Outcome::Failed(e.to_string()),
        Err(e) => Outcome::Fatal(e.into()),
    }
}

/// Runs generation over already-sampled documents.
pub fn run_documents(
    manifest: &JobManifest,
    docs: &[Document],
    client: &Client,
    opts: &RunOptions,
) -> Result<RunReport, PipelineError> {
    manifest.params.validate()?;
    let dir = &manifest.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths = OutputPaths::new(dir);

    let has_checkpoint = fs::metadata(&paths.checkpoint).map(|m| m.len() > 0).unwrap_or(false);
    if has_checkpoint && !opts.resume {
        return Err(PipelineError::CheckpointExists(dir.clone()));
    }
    let done = if opts.resume {
        load_checkpoint(&paths, &manifest.id)?
    } else {
        for p in [&paths.checkpoint, &paths.generated] {
            if p.exists() {
                fs::remove_file(p).map_err(io_err(p))?;
            }
        }
        HashMap::new()
    };
    let resumed = done.len();

    let jobs: Vec<(&Document, usize)> = docs
        .iter()
        .flat_map(|d| (0..manifest.dialogues_per_doc).map(move |r| (d, r)))
        .collect();
    let pending: Vec<(&Document, usize)> = jobs
        .iter()
        .copied()
        .filter(|(d, r)| !done.contains_key(&(d.id.clone(), *r)))
        .collect();

    let append = |p: &Path| OpenOptions::new().create(true).append(true).open(p).map_err(io_err(p));
    let mut coord = Coordinator {
        manifest_id: &manifest.id,
        paths: &paths,
        checkpoint: append(&paths.checkpoint)?,
        generated: append(&paths.generated)?,
        done,
        failures: Vec::new(),
        fatal: None,
        written: 0,
    };

    let cancel = AtomicBool::new(false);
    let interrupted = dispatch(manifest, client, &pending, &cancel, &mut coord, opts.stop_after)?;
    if interrupted {
        return Err(PipelineError::Interrupted {
            completed: coord.done.len(),
        });
    }
    if let Some(e) = coord.fatal.take() {
        return Err(e);
    }

    let mut dialogues: Vec<Dialogue> = coord.done.into_values().flatten().collect();
    let discarded = jobs.len().saturating_sub(coord.failures.len() + dialogues.len());
    sort_by_key(&mut dialogues);
    let (mut kept, mut removed) = if dialogues.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        filter_by_diversity(dialogues, manifest.keep_fraction)?
    };
    sort_by_key(&mut kept);
    sort_by_key(&mut removed);
    write_dataset(&kept, &paths.kept)?;
    write_dataset(&removed, &paths.removed)?;

    let mut flags: BTreeMap<String, usize> = Flag::ALL.iter().map(|f| (f.name().to_owned(), 0)).collect();
    for f in kept
        .iter()
        .chain(&removed)
        .filter_map(|d| d.quality.as_ref())
        .flat_map(|q| q.flags.iter().flatten())
    {
        *flags.entry(f.name().to_owned()).or_default() += 1;
    }
    let mut failures = coord.failures;
    failures.sort_by(|a, b| (&a.doc_id, a.replicate).cmp(&(&b.doc_id, b.replicate)));
    let report = RunReport {
        manifest_id: manifest.id.clone(),
        planned: jobs.len(),
        generated: kept.len() + removed.len(),
        failed: failures.len(),
        discarded,
        kept: kept.len(),
        removed: removed.len(),
        resumed,
        flags,
        failures,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&paths.report, json + "\n").map_err(io_err(&paths.report))?;
    Ok(report)
}

fn sort_by_key(dialogues: &mut [Dialogue]) {
    dialogues.sort_by(|a, b| (&a.doc_id, a.replicate_index()).cmp(&(&b.doc_id, b.replicate_index())));
}

/// Feeds pending jobs to workers and their outcomes to the coordinator.
/// Returns whether the run stopped early because of `stop_after`.
#[cfg(feature = "parallel")]
fn dispatch(
    manifest: &JobManifest,
    client: &Client,
    pending: &[(&Document, usize)],
    cancel: &AtomicBool,
    coord: &mut Coordinator<'_>,
    stop_after: Option<usize>,
) -> Result<bool, PipelineError> {
    use rayon::prelude::*;
    use std::sync::mpsc;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.concurrency.max(1))
        .build()
        .map_err(|e| PipelineError::InvalidConfig(vec![format!("cannot build worker pool: {e}")]))?;
    let (tx, rx) = mpsc::channel::<(Key, Outcome)>();

    std::thread::scope(|s| {
        s.spawn(move || {
            pool.install(|| {
                pending.par_iter().for_each_with(tx, |tx, &(doc, r)| {
                    if cancel.load(Ordering::Relaxed) {
                        return;
                    }
                    let outcome = generate_one(client, manifest, doc, r);
                    let _ = tx.send(((doc.id.clone(), r), outcome));
                });
            })
        });

        for (key, outcome) in rx {
            if let Err(e) = coord.accept(key, outcome) {
                cancel.store(true, Ordering::Relaxed);
                return Err(e);
            }
            if coord.fatal.is_some() {
                cancel.store(true, Ordering::Relaxed);
            }
            if stop_after.is_some_and(|n| coord.written >= n) {
                cancel.store(true, Ordering::Relaxed);
                return Ok(true);
            }
        }
        Ok(false)
    })
}

#[cfg(not(feature = "parallel"))]
fn dispatch(
    manifest: &JobManifest,
    client: &Client,
    pending: &[(&Document, usize)],
    cancel: &AtomicBool,
    coord: &mut Coordinator<'_>,
    stop_after: Option<usize>,
) -> Result<bool, PipelineError> {
    for &(doc, r) in pending {
        if cancel.load(Ordering::Relaxed) {
            break;
        }
        coord.accept((doc.id.clone(), r), generate_one(client, manifest, doc, r))?;
        if coord.fatal.is_some() {
            cancel.store(true, Ordering::Relaxed);
        }
        if stop_after.is_some_and(|n| coord.written >= n) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Re-runs diversity filtering over an existing dataset.
pub fn refilter(dialogues: Vec<Dialogue>, keep_fraction: f64) -> Result<(Vec<Dialogue>, Vec<Dialogue>), PipelineError> {
    let (mut kept, mut removed) = quality::filter_by_diversity(dialogues, keep_fraction)?;
    sort_by_key(&mut kept);
    sort_by_key(&mut removed);
    Ok((kept, removed))
}
