//! Job configuration files and the resolved [`JobManifest`].
//!
//! Config files are TOML with a `schema = "autoconv-config/1"` field. Every
//! field except `id`, `dataset`, `corpus_path` and the backend endpoint/model
//! has a default; see the README for the full schema.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::backend::{BackendSpec, DecodingConfig, RetryPolicy, DEFAULT_AUTH_ENV};
use crate::corpus::Source;
use crate::generator::{
    GenerationParams, DEFAULT_ANSWER_MAX_TOKENS, DEFAULT_QUESTION_MAX_TOKENS, DEFAULT_QUESTION_TOP_P,
};
use crate::quality::QualityConfig;

pub const CONFIG_SCHEMA: &str = "autoconv-config/1";

pub const DEFAULT_N_DOCUMENTS: usize = 5000;
pub const DEFAULT_DIALOGUES_PER_DOC: usize = 8;
pub const DEFAULT_KEEP_FRACTION: f64 = 0.75;
pub const DEFAULT_CONCURRENCY: usize = 8;

/// Utterance budget per dialogue for each source dataset.
pub fn default_turn_budget(dataset: Source) -> usize {
    match dataset {
        Source::Quac | Source::Custom => 14,
        Source::Coqa => 30,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub id: String,
    pub dataset: Source,
    pub corpus_path: PathBuf,
    pub n_documents: usize,
    pub dialogues_per_doc: usize,
    /// `replicate_index` is filled in per dialogue at run time.
    pub params: GenerationParams,
    pub keep_fraction: f64,
    pub seed: u64,
    pub concurrency: usize,
    pub quality: QualityConfig,
    pub backend: BackendSpec,
    pub output_dir: PathBuf,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: Option<String>,
    id: Option<String>,
    dataset: Option<Source>,
    corpus_path: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    n_documents: Option<usize>,
    dialogues_per_doc: Option<usize>,
    keep_fraction: Option<f64>,
    seed: Option<u64>,
    concurrency: Option<usize>,
    #[serde(default)]
    generation: RawGeneration,
    #[serde(default)]
    quality: RawQuality,
    #[serde(default)]
    backend: RawBackend,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGeneration {
    turn_budget: Option<usize>,
    question_top_p: Option<f64>,
    question_temperature: Option<f64>,
    question_max_tokens: Option<u32>,
    answer_strategy: Option<String>,
    answer_beam_width: Option<u32>,
    answer_max_tokens: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuality {
    hallucination_threshold: Option<f64>,
    low_overlap_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBackend {
    endpoint: Option<String>,
    model: Option<String>,
    auth_env: Option<String>,
    timeout_ms: Option<u64>,
    max_attempts: Option<u32>,
    base_backoff_ms: Option<u64>,
    jitter: Option<f64>,
    supports_beam: Option<bool>,
    logprobs: Option<bool>,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub backend_url: Option<String>,
    pub model: Option<String>,
    pub concurrency: Option<usize>,
    pub keep_fraction: Option<f64>,
    pub output_dir: Option<PathBuf>,
}

/// Reads, resolves and validates a config file.
pub fn plan(config_path: &Path, overrides: &Overrides) -> Result<JobManifest, PipelineError> {
    let text = fs::read_to_string(config_path).map_err(|source| PipelineError::Io {
        path: config_path.display().to_string(),
        source,
    })?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    plan_from_str(&text, base, overrides)
}

/// As [`plan`], with relative paths resolved against `base_dir`.
pub fn plan_from_str(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<JobManifest, PipelineError> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| PipelineError::InvalidConfig(vec![e.to_string()]))?;
    let mut errs = Vec::new();

    match raw.schema.as_deref() {
        Some(CONFIG_SCHEMA) => {}
        Some(other) => errs.push(format!(
            "unsupported config schema {other:?}, expected {CONFIG_SCHEMA:?}"
        )),
        None => errs.push(format!("missing `schema` (expected {CONFIG_SCHEMA:?})")),
    }
    let id = raw.id.unwrap_or_default();
    if id.trim().is_empty() {
        errs.push("`id` is required".into());
    }
    let dataset = raw.dataset.unwrap_or_else(|| {
        errs.push("`dataset` is required (quac, coqa or custom)".into());
        Source::Custom
    });
    let corpus_path = match raw.corpus_path {
        Some(p) => base_dir.join(p),
        None => {
            errs.push("`corpus_path` is required".into());
            PathBuf::new()
        }
    };

    let n_documents = raw.n_documents.unwrap_or(DEFAULT_N_DOCUMENTS);
    if n_documents < 1 {
        errs.push("n_documents must be at least 1".into());
    }
    let dialogues_per_doc = raw.dialogues_per_doc.unwrap_or(DEFAULT_DIALOGUES_PER_DOC);
    if dialogues_per_doc < 1 {
        errs.push("dialogues_per_doc must be at least 1".into());
    }
    let keep_fraction = overrides
        .keep_fraction
        .or(raw.keep_fraction)
        .unwrap_or(DEFAULT_KEEP_FRACTION);
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        errs.push(format!("keep_fraction must lie in (0, 1], got {keep_fraction}"));
    }
    let concurrency = overrides.concurrency.or(raw.concurrency).unwrap_or(DEFAULT_CONCURRENCY);
    if concurrency < 1 {
        errs.push("concurrency must be at least 1".into());
    }
    let seed = overrides.seed.or(raw.seed).unwrap_or(0);

    let g = raw.generation;
    let mut question_config = DecodingConfig::nucleus(
        g.question_top_p.unwrap_or(DEFAULT_QUESTION_TOP_P),
        g.question_max_tokens.unwrap_or(DEFAULT_QUESTION_MAX_TOKENS),
    );
    if let Some(t) = g.question_temperature {
        question_config.temperature = t;
    }
    question_config.seed = Some(seed);
    let answer_max = g.answer_max_tokens.unwrap_or(DEFAULT_ANSWER_MAX_TOKENS);
    let answer_config = match g.answer_strategy.as_deref().unwrap_or("greedy") {
        "greedy" => DecodingConfig::greedy(answer_max),
        "beam" => DecodingConfig::beam(g.answer_beam_width.unwrap_or(4), answer_max),
        other => {
            errs.push(format!(
                "generation.answer_strategy must be greedy or beam, got {other:?}"
            ));
            DecodingConfig::greedy(answer_max)
        }
    };
    let params = GenerationParams {
        turn_budget: g.turn_budget.unwrap_or_else(|| default_turn_budget(dataset)),
        question_config,
        answer_config,
        replicate_index: 0,
    };
    if let Err(e) = params.validate() {
        errs.push(e.to_string());
    }

    let q = raw.quality;
    let quality = QualityConfig {
        hallucination: q
            .hallucination_threshold
            .unwrap_or(QualityConfig::default().hallucination),
        low_overlap: q.low_overlap_threshold.unwrap_or(QualityConfig::default().low_overlap),
    };
    if !(0.0..=1.0).contains(&quality.hallucination)
        || !(0.0..=1.0).contains(&quality.low_overlap)
        || quality.hallucination > quality.low_overlap
    {
        errs.push("quality thresholds must satisfy 0 <= hallucination <= low_overlap <= 1".into());
    }

    let b = raw.backend;
    let defaults = RetryPolicy::default();
    let endpoint = overrides.backend_url.clone().or(b.endpoint).unwrap_or_default();
    let model_id = overrides.model.clone().or(b.model).unwrap_or_default();
    if endpoint.is_empty() {
        errs.push("backend.endpoint is required".into());
    }
    let backend = BackendSpec {
        endpoint,
        model_id,
        auth_env: b.auth_env.unwrap_or_else(|| DEFAULT_AUTH_ENV.to_owned()),
        timeout_ms: b.timeout_ms.unwrap_or(60_000),
        retry: RetryPolicy {
            max_attempts: b.max_attempts.unwrap_or(defaults.max_attempts),
            base_backoff_ms: b.base_backoff_ms.unwrap_or(defaults.base_backoff_ms),
            jitter: b.jitter.unwrap_or(defaults.jitter),
        },
        supports_beam: b.supports_beam.unwrap_or(false),
        logprobs: b.logprobs.unwrap_or(true),
    };
    if !backend.endpoint.is_empty() {
        errs.extend(backend.validate());
    }

    let output_dir = overrides
        .output_dir
        .clone()
        .unwrap_or_else(|| base_dir.join(raw.output_dir.unwrap_or_else(|| PathBuf::from("out").join(&id))));

    if !errs.is_empty() {
        return Err(PipelineError::InvalidConfig(errs));
    }
    Ok(JobManifest {
        id,
        dataset,
        corpus_path,
        n_documents,
        dialogues_per_doc,
        params,
        keep_fraction,
        seed,
        concurrency,
        quality,
        backend,
        output_dir,
    })
}
