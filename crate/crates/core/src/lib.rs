//! Document-grounded synthetic conversation generation.
//!
//! A finetuned language model behind an OpenAI-compatible completion endpoint
//! plays both sides of an information-seeking conversation about a document:
//! user questions are drawn with nucleus sampling and system answers with
//! greedy (or beam) decoding. Generated dialogues are scored for n-gram
//! diversity, the least diverse are filtered out, and answers are checked
//! against the grounding document. The crate also ships the word-level F1 /
//! Exact Match harness used to evaluate conversational QA models trained on
//! the resulting data.
//!
//! Module map:
//! - [`corpus`]: documents, dialogues, QuAC/CoQA ingestion, dataset files
//! - [`backend`]: decoding configs, completion clients, scripted test double
//! - [`generator`]: prompt rendering and the role-alternating generation loop
//! - [`quality`]: repetition/diversity scoring, filtering, grounding flags
//! - [`eval`]: answer normalization, F1, EM, corpus aggregation
//! - [`pipeline`]: manifests, checkpointed concurrent runs, training schedules

pub mod backend;
pub mod corpus;
pub mod eval;
pub mod generator;
pub mod par;
pub mod pipeline;
pub mod quality;

pub use backend::{BackendError, BackendSpec, Client, Completion, DecodingConfig, Strategy};
pub use corpus::{AnnotatedDialogue, Dialogue, Document, GoldQA, Role, Turn};
pub use eval::{EvalResult, Prediction};
pub use generator::GenerationParams;
pub use pipeline::{JobManifest, TrainingSchedule};
pub use quality::{Flag, QualityConfig, QualityReport};
