//! The phase training loop: shuffled epochs, greedy token batching,
//! parallel gradient evaluation with a deterministic reduction, and the
//! loss curve.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::model::{build_forward, shifted_targets, ModelConfig, Parameters, Sequence};
use crate::numerics::{real, Mode, Scalar, Tensor};

use super::checkpoint::save_checkpoint;
use super::optimizer::{adamw_step, clip_gradients, lr_at, OptimizerState};
use super::{PhaseConfig, PhaseKind, TrainingError, DEFAULT_BETAS, DEFAULT_EPS, GRAD_CLIP_NORM};

/// One row of the loss curve CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub tokens_seen: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Where the phase's parameters come from; later stages refuse
/// `RandomInit` unless forced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartPoint {
    RandomInit,
    FromCheckpoint,
}

/// Periodic checkpointing: a directory plus a step interval.
#[derive(Debug, Clone)]
pub struct CheckpointPolicy {
    pub dir: PathBuf,
    pub every_steps: usize,
}

#[derive(Debug)]
pub struct TrainOutcome<T: Scalar> {
    pub params: Parameters<T>,
    pub state: OptimizerState<T>,
    pub curve: Vec<CurvePoint>,
    pub tokens_seen: u64,
    pub final_checkpoint: Option<PathBuf>,
}

/// Deterministic batch schedule: epoch-shuffled sequence indices packed
/// greedily into batches of at most `batch_tokens` (always at least one
/// sequence). Reproducible from the seed alone, so resuming is a cheap
/// replay of batch boundaries.
struct BatchPlanner {
    lens: Vec<usize>,
    batch_tokens: u64,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchPlanner {
    fn new(lens: Vec<usize>, batch_tokens: u64, seed: u64) -> Self {
        let mut planner = BatchPlanner {
            lens,
            batch_tokens,
            seed,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        planner.reshuffle();
        planner
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order = (0..self.lens.len()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::new();
        let mut tokens = 0u64;
        loop {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
                // An epoch boundary also ends the batch so epochs stay
                // aligned across resumes.
                if !batch.is_empty() {
                    return batch;
                }
            }
            let idx = self.order[self.cursor];
            let len = self.lens[idx] as u64;
            if !batch.is_empty() && tokens + len > self.batch_tokens {
                return batch;
            }
            batch.push(idx);
            tokens += len;
            self.cursor += 1;
            if tokens >= self.batch_tokens {
                return batch;
            }
        }
    }
}

/// Train one phase to its token budget.
///
/// Resuming: pass the checkpoint's optimizer state; the first
/// `state.step()` batches are replayed (boundaries only) so the data
/// stream continues exactly where it stopped. `force_fresh` overrides the
/// rule that fine-tune and stage-2 phases must start from a checkpoint.
pub fn train_phase<T: Scalar>(
    params: Parameters<T>,
    resume: Option<OptimizerState<T>>,
    data: &[Sequence],
    cfg: &PhaseConfig,
    start: StartPoint,
    checkpoints: Option<&CheckpointPolicy>,
    force_fresh: bool,
) -> Result<TrainOutcome<T>, TrainingError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let model_cfg: ModelConfig = params.config.clone();
    for seq in data {
        seq.validate(&model_cfg)?;
    }
    if cfg.kind != PhaseKind::Pretrain && start == StartPoint::RandomInit && !force_fresh {
        return Err(TrainingError::StageOrderViolation {
            phase: cfg.name.clone(),
        });
    }

    let mut params = params;
    let mut state = resume.unwrap_or_else(|| OptimizerState::new(&params));
    let total_steps = cfg.total_steps();
    if state.step() > total_steps {
        return Err(TrainingError::StepOutOfRange {
            step: state.step(),
            total_steps,
        });
    }

    let lens: Vec<usize> = data.iter().map(Sequence::len).collect();
    let mut planner = BatchPlanner::new(lens, cfg.batch_tokens, cfg.seed);
    let mut tokens_seen = 0u64;
    for _ in 0..state.step() {
        let replayed = planner.next_batch();
        tokens_seen += replayed.iter().map(|&i| data[i].len() as u64).sum::<u64>();
    }

    let mut curve = Vec::with_capacity(total_steps - state.step());
    let mut last_checkpoint: Option<PathBuf> = None;
    for step in state.step() + 1..=total_steps {
        let batch = planner.next_batch();
        let lr = lr_at(cfg, step, total_steps)?;

        // Per-sequence losses and gradients in parallel; the reduction
        // below runs in batch order so results do not depend on thread
        // scheduling.
        let per_seq: Vec<Result<(f64, usize, Vec<(String, Tensor<T>)>), TrainingError>> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &idx)| {
                let seq = &data[idx];
                let dropout_seed = cfg
                    .seed
                    .wrapping_mul(0x0100_0000_01B3)
                    .wrapping_add((step as u64) << 20)
                    .wrapping_add(k as u64);
                let mut fg = build_forward(&params, seq, Mode::Train, dropout_seed, true)?;
                let loss_node = fg.loss.expect("loss requested");
                let loss = fg.graph.evaluate(&[], &[loss_node])?[0]
                    .scalar_value()
                    .to_f64()
                    .unwrap();
                fg.graph.backward(loss_node)?;
                let (_, mask) = shifted_targets(seq);
                let weight = mask.iter().filter(|&&m| m).count();
                Ok((loss, weight, fg.graph.named_grads()))
            })
            .collect();

        let mut batch_grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut loss_weighted = 0.0;
        let mut weight_total = 0usize;
        let mut batch_tokens = 0u64;
        for (result, &idx) in per_seq.into_iter().zip(&batch) {
            let (loss, weight, grads) = match result {
                Ok(value) => value,
                // Any non-finite value surfacing inside the loss
                // computation aborts the phase, pointing at the last
                // checkpoint written during this run.
                Err(TrainingError::Model(crate::model::ModelError::Numerics(
                    crate::numerics::NumericsError::NonFinite { .. },
                ))) => {
                    return Err(TrainingError::NonFiniteLoss {
                        step,
                        last_checkpoint,
                    })
                }
                Err(other) => return Err(other),
            };
            loss_weighted += loss * weight as f64;
            weight_total += weight;
            batch_tokens += data[idx].len() as u64;
            let scale = real::<T>(weight as f64);
            for (name, grad) in grads {
                let entry = batch_grads
                    .entry(name)
                    .or_insert_with(|| Tensor::zeros(grad.shape()));
                for (acc, &g) in entry.data_mut().iter_mut().zip(grad.data()) {
                    *acc = *acc + g * scale;
                }
            }
        }
        let loss = loss_weighted / weight_total as f64;
        tokens_seen += batch_tokens;
        if !loss.is_finite() {
            return Err(TrainingError::NonFiniteLoss {
                step,
                last_checkpoint,
            });
        }
        let inv_weight = real::<T>(1.0 / weight_total as f64);
        for grad in batch_grads.values_mut() {
            for g in grad.data_mut() {
                *g = *g * inv_weight;
            }
        }

        clip_gradients(&mut batch_grads, GRAD_CLIP_NORM);
        adamw_step(
            &mut params,
            &batch_grads,
            &mut state,
            lr,
            DEFAULT_BETAS,
            DEFAULT_EPS,
            cfg.weight_decay,
        )?;

        curve.push(CurvePoint {
            step,
            tokens_seen,
            lr,
            loss,
        });

        if let Some(policy) = checkpoints {
            if policy.every_steps > 0 && (step % policy.every_steps == 0 || step == total_steps) {
                let path = policy.dir.join(format!("{}-step{step}.ckpt", cfg.name));
                save_checkpoint(&path, &params, &state, &model_cfg)?;
                last_checkpoint = Some(path);
            }
        }
    }

    Ok(TrainOutcome {
        params,
        state,
        curve,
        tokens_seen,
        final_checkpoint: last_checkpoint,
    })
}

/// Write the loss curve as `step,tokens_seen,lr,loss` CSV.
pub fn write_loss_csv(path: &Path, curve: &[CurvePoint]) -> Result<(), std::io::Error> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,tokens_seen,lr,loss")?;
    for p in curve {
        writeln!(out, "{},{},{},{}", p.step, p.tokens_seen, p.lr, p.loss)?;
    }
    out.flush()
}
