//! Job planning, checkpointed generation runs and training schedules.

mod manifest;
mod run;
mod schedule;

use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;
use crate::corpus::CorpusError;
use crate::eval::EvalError;
use crate::generator::GenerationError;
use crate::quality::QualityError;

pub use manifest::{
    default_turn_budget, plan, plan_from_str, JobManifest, Overrides, CONFIG_SCHEMA, DEFAULT_CONCURRENCY,
    DEFAULT_DIALOGUES_PER_DOC, DEFAULT_KEEP_FRACTION, DEFAULT_N_DOCUMENTS,
};
pub use run::{
    load_corpus, refilter, run, run_documents, FailureRecord, OutputPaths, RunOptions, RunReport, CHECKPOINT_FILE,
    GENERATED_FILE, KEPT_FILE, REMOVED_FILE, REPORT_FILE,
};
pub use schedule::{training_schedule, TrainingSchedule};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("corrupted checkpoint, refusing to resume: {0}")]
    CorruptCheckpoint(String),
    #[error("{0} already has a checkpoint; pass --resume to continue it")]
    CheckpointExists(PathBuf),
    #[error("run interrupted after {completed} dialogues; rerun with --resume")]
    Interrupted { completed: usize },
}
