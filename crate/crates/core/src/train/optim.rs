//! AdamW and the learning-rate schedule.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{Gradients, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    LinearDecay,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "linear" | "linear-decay" => Ok(Schedule::LinearDecay),
            _ => Err(Error::Config(format!("unknown schedule '{s}'"))),
        }
    }
}

/// Optimizer and loop settings shared by SFT and DPO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub schedule: Schedule,
    pub dpo_beta: f64,
    pub dpo_length_normalize: bool,
    /// DPO steps per cycle when interleaving with SFT refresh; 0 disables.
    pub interleave_dpo_steps: usize,
    /// SFT steps per refresh cycle.
    pub interleave_sft_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 128,
            epochs: 6,
            checkpoint_every: 30,
            schedule: Schedule::LinearDecay,
            dpo_beta: 0.1,
            dpo_length_normalize: false,
            interleave_dpo_steps: 0,
            interleave_sft_steps: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("betas must lie in (0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay non-negative");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(self.dpo_beta > 0.0 && self.dpo_beta.is_finite()) {
            return bad("dpo_beta must be positive");
        }
        if self.interleave_dpo_steps > 0 && self.interleave_sft_steps == 0 {
            return bad("interleaving needs a positive SFT refresh length");
        }
        Ok(())
    }
}

/// Learning rate after `step` of `total_steps` optimizer steps.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, schedule: Schedule) -> f64 {
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::LinearDecay if total_steps == 0 => base_lr,
        Schedule::LinearDecay => {
            base_lr * (1.0 - step.min(total_steps) as f64 / total_steps as f64)
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: usize,
}

impl OptimizerState {
    pub fn new(params: &ParameterSet) -> Self {
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update with bias correction:
///
/// ```text
/// m ← β1·m + (1−β1)·g          v ← β2·v + (1−β2)·g²
/// θ ← θ − lr·(m/(1−β1^t) / (sqrt(v/(1−β2^t)) + eps) + wd·θ)
/// ```
pub fn adamw_step(
    params: &mut ParameterSet,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(
            "optimizer buffers do not match the parameters".into(),
        ));
    }
    if let Some(i) = grads.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::Training {
            step: state.step,
            message: format!("non-finite gradient at parameter index {i}"),
            last_good: None,
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    for (((p, &g), m), v) in params
        .as_mut_slice()
        .iter_mut()
        .zip(grads.as_slice())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1f * *m + (1.0 - b1f) * g;
        *v = b2f * *v + (1.0 - b2f) * g * g;
        let mhat = *m as f64 / c1;
        let vhat = *v as f64 / c2;
        let upd = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *p as f64;
        *p = (*p as f64 - lr * upd) as f32;
    }
    Ok(())
}
