//! Phased trainer: AdamW with linear warmup/decay, greedy token batching,
//! loss curves, and checkpointing.

mod checkpoint;
mod optimizer;
mod trainer;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use optimizer::{adamw_step, clip_gradients, lr_at, OptimizerState};
pub use trainer::{train_phase, write_loss_csv, CheckpointPolicy, CurvePoint, StartPoint, TrainOutcome};

/// Default Adam moment decay rates.
pub const DEFAULT_BETAS: (f64, f64) = (0.9, 0.999);
/// Default Adam denominator stabilizer.
pub const DEFAULT_EPS: f64 = 1e-8;
/// Global gradient-norm ceiling applied before every step.
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// Reference full-scale budgets (documentation only; never run here):
/// pre-training consumed 200e9 tokens in 2e6-token batches, fine-tuning
/// 0.2e9 tokens in 32768-token batches, both at peak rate 1e-5.
pub const FULL_SCALE_PRETRAIN_TOKENS: u64 = 200_000_000_000;
pub const FULL_SCALE_PRETRAIN_BATCH_TOKENS: u64 = 2_000_000;
pub const FULL_SCALE_FINETUNE_TOKENS: u64 = 200_000_000;
pub const FULL_SCALE_FINETUNE_BATCH_TOKENS: u64 = 32_768;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("invalid phase config: {0}")]
    InvalidConfig(String),
    #[error("phase config {path}: {detail}")]
    ConfigFile { path: PathBuf, detail: String },
    #[error("schedule needs total_steps > warmup_steps, got {total_steps} <= {warmup}")]
    ScheduleTooShort { total_steps: usize, warmup: usize },
    #[error("step {step} outside schedule 0..={total_steps}")]
    StepOutOfRange { step: usize, total_steps: usize },
    #[error("non-finite gradient in tensor '{tensor}'; step aborted")]
    NonFiniteGradient { tensor: String },
    #[error("gradient for '{tensor}' has shape {got:?}, parameter has {want:?}")]
    GradientShapeMismatch {
        tensor: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("optimizer state does not match parameters: {0}")]
    StateMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(
        "loss became non-finite at step {step}{}",
        last_checkpoint.as_ref().map(|p| format!("; last good checkpoint: {}", p.display())).unwrap_or_default()
    )]
    NonFiniteLoss {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },
    #[error(
        "phase '{phase}' must start from a checkpoint of the previous stage; \
         pass the override flag to train it from random initialization"
    )]
    StageOrderViolation { phase: String },
    #[error("checkpoint {path}: {detail}")]
    BadCheckpoint { path: PathBuf, detail: String },
    #[error(
        "checkpoint was written for a different model configuration: {detail}"
    )]
    ConfigMismatch { detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::numerics::NumericsError> for TrainingError {
    fn from(e: crate::numerics::NumericsError) -> Self {
        TrainingError::Model(ModelError::Numerics(e))
    }
}

/// Which training stage a phase belongs to; later stages must start from
/// an earlier stage's checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseKind {
    Pretrain,
    Finetune,
    Stage2,
}

/// Hyperparameters and budget of one training phase, loadable from a TOML
/// file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    pub name: String,
    pub kind: PhaseKind,
    /// Sample files consumed by this phase.
    #[serde(default)]
    pub datasets: Vec<PathBuf>,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_tokens: u64,
    pub batch_tokens: u64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let fail = |msg: String| Err(TrainingError::InvalidConfig(msg));
        if self.warmup_steps < 1 {
            return fail("warmup_steps must be at least 1".into());
        }
        if self.batch_tokens == 0 {
            return fail("batch_tokens must be positive".into());
        }
        if self.batch_tokens > self.total_tokens {
            return fail(format!(
                "batch_tokens {} exceeds total_tokens {}",
                self.batch_tokens, self.total_tokens
            ));
        }
        if !(self.peak_lr > 0.0) || !self.peak_lr.is_finite() {
            return fail(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return fail(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            ));
        }
        let total_steps = self.total_steps();
        if total_steps <= self.warmup_steps {
            return Err(TrainingError::ScheduleTooShort {
                total_steps,
                warmup: self.warmup_steps,
            });
        }
        Ok(())
    }

    /// Number of optimizer steps in the phase.
    pub fn total_steps(&self) -> usize {
        (self.total_tokens / self.batch_tokens) as usize
    }

    pub fn from_toml_path(path: &std::path::Path) -> Result<Self, TrainingError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PhaseConfig =
            toml::from_str(&text).map_err(|e| TrainingError::ConfigFile {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, TrainingError> {
        toml::to_string_pretty(self)
            .map_err(|e| TrainingError::InvalidConfig(e.to_string()))
    }
}
