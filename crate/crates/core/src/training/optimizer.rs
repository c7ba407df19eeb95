//! AdamW with decoupled weight decay, the warmup/decay schedule, and
//! global gradient clipping.

use std::collections::BTreeMap;

use crate::model::Parameters;
use crate::numerics::{real, Scalar, Tensor};

use super::{PhaseConfig, TrainingError};

/// First/second gradient moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar> {
    step: usize,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero moments shaped after the parameters.
    pub fn new(params: &Parameters<T>) -> Self {
        let m = params
            .iter()
            .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape())))
            .collect::<BTreeMap<_, _>>();
        let v = m.clone();
        OptimizerState { step: 0, m, v }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Rebuild state from checkpoint pieces, validating shapes against the
    /// parameters.
    pub fn from_parts(
        params: &Parameters<T>,
        step: usize,
        m: BTreeMap<String, Tensor<T>>,
        v: BTreeMap<String, Tensor<T>>,
    ) -> Result<Self, TrainingError> {
        for (label, map) in [("first", &m), ("second", &v)] {
            if map.len() != params.len() {
                return Err(TrainingError::StateMismatch(format!(
                    "{label}-moment map has {} tensors, parameters have {}",
                    map.len(),
                    params.len()
                )));
            }
            for (name, tensor) in params.iter() {
                match map.get(name) {
                    Some(t) if t.shape() == tensor.shape() => {}
                    Some(t) => {
                        return Err(TrainingError::StateMismatch(format!(
                            "{label} moment '{name}' has shape {:?}, parameter has {:?}",
                            t.shape(),
                            tensor.shape()
                        )))
                    }
                    None => {
                        return Err(TrainingError::StateMismatch(format!(
                            "{label} moment for '{name}' missing"
                        )))
                    }
                }
            }
        }
        Ok(OptimizerState { step, m, v })
    }

    pub(crate) fn parts(&self) -> (usize, &BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (self.step, &self.m, &self.v)
    }
}

/// Learning rate at `step` of the linear warmup/decay schedule: rises to
/// `peak_lr` at `warmup_steps`, then falls linearly to zero at
/// `total_steps`.
pub fn lr_at(cfg: &PhaseConfig, step: usize, total_steps: usize) -> Result<f64, TrainingError> {
    if total_steps <= cfg.warmup_steps {
        return Err(TrainingError::ScheduleTooShort {
            total_steps,
            warmup: cfg.warmup_steps,
        });
    }
    if step > total_steps {
        return Err(TrainingError::StepOutOfRange { step, total_steps });
    }
    let lr = if step < cfg.warmup_steps {
        cfg.peak_lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.peak_lr * (total_steps - step) as f64 / (total_steps - cfg.warmup_steps) as f64
    };
    Ok(lr)
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_gradients<T: Scalar>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.sq_norm_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = real::<T>(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}

/// One AdamW update: bias-corrected Adam step plus the decoupled decay
/// term `lr · weight_decay · param`. A non-finite gradient aborts before
/// anything is touched; a missing gradient tensor counts as zero.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step<T: Scalar>(
    params: &mut Parameters<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<(), TrainingError> {
    for (name, grad) in grads {
        let param = params.get(name).map_err(TrainingError::Model)?;
        if grad.shape() != param.shape() {
            return Err(TrainingError::GradientShapeMismatch {
                tensor: name.clone(),
                got: grad.shape().to_vec(),
                want: param.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(TrainingError::NonFiniteGradient {
                tensor: name.clone(),
            });
        }
    }

    let (beta1, beta2) = betas;
    let t = state.step + 1;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);

    for (name, param) in params.iter_mut() {
        let m = state.m.get_mut(name).expect("moment tracked per parameter");
        let v = state.v.get_mut(name).expect("moment tracked per parameter");
        let zero = T::zero();
        let grad = grads.get(name);
        for i in 0..param.len() {
            let g = grad.map_or(zero, |g| g.data()[i]).to_f64().unwrap();
            let mi = beta1 * m.data()[i].to_f64().unwrap() + (1.0 - beta1) * g;
            let vi = beta2 * v.data()[i].to_f64().unwrap() + (1.0 - beta2) * g * g;
            m.data_mut()[i] = real(mi);
            v.data_mut()[i] = real(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let p = param.data()[i].to_f64().unwrap();
            let update = lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * p);
            param.data_mut()[i] = real(p - update);
        }
    }
    state.step = t;
    Ok(())
}
