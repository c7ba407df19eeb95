//! `kgchat train`: run one training phase. Fine-tune and stage-2 phases
//! must start from an earlier checkpoint; `--force` overrides that rule
//! for experiments.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};

use kgchat_core::corpus::{read_samples, serialize_sample};
use kgchat_core::model::{ModelConfig, Parameters, Sequence};
use kgchat_core::tokenizer::Vocabulary;
use kgchat_core::training::{
    load_checkpoint, save_checkpoint, train_phase, write_loss_csv, CheckpointPolicy, PhaseConfig,
    PhaseKind, StartPoint,
};

use crate::config::FileConfig;
use crate::{load_vocab, required_path, RunArtifacts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhaseArg {
    /// Stage 1a: next-token training on the mixed dialogue corpus.
    Pretrain,
    /// Stage 1b: dialogue fine-tuning from a pretrain checkpoint.
    Finetune,
    /// Stage 2: query generation and grounded responses from a stage-1
    /// checkpoint.
    Stage2,
}

impl From<PhaseArg> for PhaseKind {
    fn from(value: PhaseArg) -> Self {
        match value {
            PhaseArg::Pretrain => PhaseKind::Pretrain,
            PhaseArg::Finetune => PhaseKind::Finetune,
            PhaseArg::Stage2 => PhaseKind::Stage2,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Which phase to run.
    #[arg(long, value_enum)]
    pub phase: PhaseArg,

    /// Phase hyperparameters (TOML). Defaults to desk-scale settings for
    /// the chosen phase.
    #[arg(long, value_name = "FILE")]
    pub phase_config: Option<PathBuf>,

    /// Model shape (TOML). Defaults to the desk configuration, or to the
    /// shape stored in `--init-from`.
    #[arg(long, value_name = "FILE")]
    pub model_config: Option<PathBuf>,

    /// Training samples (JSON lines). Repeat to merge files; overrides the
    /// dataset list in the phase config.
    #[arg(long = "data", value_name = "FILE")]
    pub data: Vec<PathBuf>,

    /// Tokenizer vocabulary (falls back to `vocab` in the config file).
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,

    /// Checkpoint to start from; required for finetune and stage2 unless
    /// `--force` is given.
    #[arg(long, value_name = "CKPT")]
    pub init_from: Option<PathBuf>,

    /// Continue the interrupted phase recorded in `--init-from`,
    /// restoring optimizer state and step count.
    #[arg(long, requires = "init_from")]
    pub resume: bool,

    /// Allow a finetune or stage2 phase to start from random
    /// initialization.
    #[arg(long)]
    pub force: bool,

    /// Directory for checkpoints, the loss curve, and the effective phase
    /// config.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,

    /// Write a checkpoint every N steps (0 disables periodic
    /// checkpoints; the final model is always saved).
    #[arg(long, default_value_t = 200, value_name = "N")]
    pub checkpoint_every: usize,

    /// Override the phase config's data-order/init seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Desk-scale hyperparameter defaults per phase, used when no phase
/// config file is given.
fn default_phase_config(kind: PhaseKind) -> PhaseConfig {
    let (name, peak_lr, warmup_steps, total_tokens) = match kind {
        PhaseKind::Pretrain => ("pretrain", 1e-3, 50, 1_000_000),
        PhaseKind::Finetune => ("finetune", 3e-4, 20, 200_000),
        PhaseKind::Stage2 => ("stage2", 3e-4, 20, 200_000),
    };
    PhaseConfig {
        name: name.to_string(),
        kind,
        datasets: Vec::new(),
        peak_lr,
        warmup_steps,
        total_tokens,
        batch_tokens: 4096,
        weight_decay: 0.01,
        seed: 0,
    }
}

pub fn run(args: TrainArgs, file_config: &FileConfig) -> Result<RunArtifacts> {
    let kind = PhaseKind::from(args.phase);

    let mut phase_cfg = match &args.phase_config {
        Some(path) => {
            let cfg = PhaseConfig::from_toml_path(path)
                .with_context(|| format!("phase config {}", path.display()))?;
            if cfg.kind != kind {
                bail!(
                    "phase config {} declares kind '{:?}' but --phase asked for '{:?}'",
                    path.display(),
                    cfg.kind,
                    kind
                );
            }
            cfg
        }
        None => default_phase_config(kind),
    };
    if let Some(seed) = args.seed {
        phase_cfg.seed = seed;
    }
    if !args.data.is_empty() {
        phase_cfg.datasets = args.data.clone();
    }
    if phase_cfg.datasets.is_empty() {
        bail!("no training data: pass --data or list datasets in the phase config");
    }

    let requested_model_cfg = match &args.model_config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading model config {}", path.display()))?;
            let cfg: ModelConfig = toml::from_str(&text)
                .with_context(|| format!("parsing model config {}", path.display()))?;
            cfg.validate()?;
            Some(cfg)
        }
        None => None,
    };

    // Parameters come from the starting checkpoint when one is given,
    // otherwise from seeded random initialization.
    let (params, resume_state, start, model_cfg) = match &args.init_from {
        Some(ckpt_path) => {
            let ckpt = load_checkpoint::<f64>(ckpt_path, requested_model_cfg.as_ref())
                .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
            let state = args.resume.then_some(ckpt.state);
            (ckpt.params, state, StartPoint::FromCheckpoint, ckpt.config)
        }
        None => {
            let cfg = requested_model_cfg.unwrap_or_else(ModelConfig::desk);
            let params = Parameters::init(&cfg, phase_cfg.seed)?;
            (params, None, StartPoint::RandomInit, cfg)
        }
    };

    let vocab_path = required_path(args.vocab.as_ref(), file_config.vocab.as_ref(), "vocab", "--vocab")?;
    let vocab = load_vocab(&vocab_path)?;
    if vocab.size() > model_cfg.vocab_size {
        bail!(
            "vocabulary {} has {} tokens but the model holds at most {}",
            vocab_path.display(),
            vocab.size(),
            model_cfg.vocab_size
        );
    }

    let sequences = load_sequences(&phase_cfg.datasets, &vocab, &model_cfg)?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let policy = CheckpointPolicy {
        dir: args.out_dir.clone(),
        every_steps: args.checkpoint_every,
    };
    let outcome = train_phase(
        params,
        resume_state,
        &sequences,
        &phase_cfg,
        start,
        Some(&policy),
        args.force,
    )?;

    let model_out = args.out_dir.join("model.ckpt");
    save_checkpoint(&model_out, &outcome.params, &outcome.state, &model_cfg)?;
    let curve_out = args.out_dir.join("loss.csv");
    write_loss_csv(&curve_out, &outcome.curve)
        .with_context(|| format!("writing {}", curve_out.display()))?;
    let phase_out = args.out_dir.join("phase.toml");
    std::fs::write(&phase_out, phase_cfg.to_toml_string()?)
        .with_context(|| format!("writing {}", phase_out.display()))?;

    let (first, last) = match (outcome.curve.first(), outcome.curve.last()) {
        (Some(f), Some(l)) => (f.loss, l.loss),
        _ => (f64::NAN, f64::NAN),
    };
    println!(
        "phase '{}': {} steps, {} tokens, loss {:.4} -> {:.4}",
        phase_cfg.name,
        outcome.curve.len(),
        outcome.tokens_seen,
        first,
        last
    );
    println!("checkpoint: {}", model_out.display());

    let mut inputs = phase_cfg.datasets.clone();
    inputs.push(vocab_path);
    inputs.extend(args.phase_config.iter().cloned());
    inputs.extend(args.model_config.iter().cloned());
    inputs.extend(args.init_from.iter().cloned());
    Ok(RunArtifacts {
        seed: Some(phase_cfg.seed),
        inputs,
        outputs: vec![model_out, curve_out, phase_out],
        ..RunArtifacts::deterministic()
    })
}

/// Read every dataset and serialize its samples. Samples that cannot fit
/// the model's length limit even after truncation are skipped with a
/// warning; an empty result is an error.
fn load_sequences(
    datasets: &[PathBuf],
    vocab: &Vocabulary,
    model_cfg: &ModelConfig,
) -> Result<Vec<Sequence>> {
    let mut sequences = Vec::new();
    let mut skipped = 0usize;
    for path in datasets {
        let samples =
            read_samples(path).with_context(|| format!("reading samples {}", path.display()))?;
        for (line, sample) in samples.iter().enumerate() {
            match serialize_sample(sample, vocab, model_cfg) {
                Ok(seq) => sequences.push(seq),
                Err(err) => {
                    skipped += 1;
                    log::warn!("{}: sample on line {} skipped: {err}", path.display(), line + 1);
                }
            }
        }
    }
    if skipped > 0 {
        println!("skipped {skipped} samples that exceed the model's length limit");
    }
    if sequences.is_empty() {
        bail!("no usable training sequences in the given datasets");
    }
    Ok(sequences)
}
