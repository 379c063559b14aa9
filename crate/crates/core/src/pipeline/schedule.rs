use serde::{Deserialize, Serialize};

use super::PipelineError;

/// Gradient-step budget for two-stage training of the small task model:
/// pretraining on synthetic dialogues, then finetuning on human ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    /// Set when the synthetic count is not in the published table.
    #[serde(default)]
    pub pretrain_extrapolated: bool,
    /// Set when the human count is not in the published table.
    #[serde(default)]
    pub finetune_extrapolated: bool,
}

impl TrainingSchedule {
    pub fn is_extrapolated(&self) -> bool {
        self.pretrain_extrapolated || self.finetune_extrapolated
    }
}

/// Human dialogues -> finetuning steps.
const FINETUNE_TABLE: [(u64, u64); 4] = [(50, 200), (100, 400), (200, 800), (500, 2000)];

/// Synthetic dialogues -> pretraining steps. The two smallest entries come
/// from the 50/100 human-dialogue main runs, the rest from the scaling runs.
const PRETRAIN_TABLE: [(u64, u64); 7] = [
    (250, 1000),
    (500, 2000),
    (1000, 2000),
    (2000, 4000),
    (4000, 8000),
    (10000, 20000),
    (20000, 40000),
];

fn lookup(table: &[(u64, u64)], key: u64) -> Option<u64> {
    table.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

/// Exact table lookup; off-table counts fall back to
/// `finetune = 4 * n_human` and `pretrain = max(1000, 2 * n_synthetic)`.
pub fn training_schedule(n_human: u64, n_synthetic: u64) -> Result<TrainingSchedule, PipelineError> {
    if n_human == 0 || n_synthetic == 0 {
        return Err(PipelineError::InvalidConfig(vec![
            "schedule needs at least one human and one synthetic dialogue".into(),
        ]));
    }
    let finetune = lookup(&FINETUNE_TABLE, n_human);
    let pretrain = lookup(&PRETRAIN_TABLE, n_synthetic);
    Ok(TrainingSchedule {
        pretrain_steps: pretrain.unwrap_or_else(|| (2 * n_synthetic).max(1000)),
        finetune_steps: finetune.unwrap_or(4 * n_human),
        pretrain_extrapolated: pretrain.is_none(),
        finetune_extrapolated: finetune.is_none(),
    })
}
