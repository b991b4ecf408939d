//! AdamW with warmup + cosine decay for pretraining, and momentum SGD with
//! polynomial decay for fine-tuning.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::params::ParamStore;

/// Decoupled-weight-decay Adam settings plus the learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Learning rate at step 0; warmup interpolates from here to `base_lr`.
    pub warmup_start_lr: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            base_lr: 1.5e-4,
            warmup_steps: 5,
            total_steps: 100,
            warmup_start_lr: 1e-6,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(contract(format!("betas must lie in [0, 1): {} {}", self.beta1, self.beta2)));
        }
        if self.weight_decay < 0.0 {
            return Err(contract("weight decay must be non-negative"));
        }
        if self.total_steps == 0 {
            return Err(contract("total_steps must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(contract(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.eps > 0.0) {
            return Err(contract("eps must be positive"));
        }
        Ok(())
    }

    /// Five percent of `total_steps`, the default warmup length.
    pub fn default_warmup(total_steps: usize) -> usize {
        total_steps / 20
    }
}

/// Linear warmup from `warmup_start_lr` to `base_lr`, then cosine decay to 0
/// at `total_steps`. Steps past the end clamp to the final value.
pub fn lr_at(step: usize, cfg: &OptimizerConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        let frac = step as f64 / cfg.warmup_steps as f64;
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * frac;
    }
    let span = cfg.total_steps - cfg.warmup_steps;
    if span == 0 {
        return cfg.base_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / span as f64;
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// First and second moments for every parameter of a store.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_store(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self { m: zeros.clone(), v: zeros }
    }
}

/// One AdamW update at 1-based `step` with learning rate `lr`.
///
/// Trainable parameters must carry a gradient; frozen ones are skipped.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    cfg: &OptimizerConfig,
    lr: f64,
    step: usize,
) -> Result<()> {
    if step == 0 {
        return Err(contract("optimizer steps are 1-based"));
    }
    if state.m.len() != store.len() {
        return Err(contract("optimizer state does not match parameter store"));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (k, p) in store.iter_mut().enumerate() {
        let t = &mut p.tensor;
        if !t.requires_grad {
            continue;
        }
        let Some(grad) = t.grad.as_ref() else {
            return Err(contract(format!("parameter {} has no gradient", p.name)));
        };
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for i in 0..t.data.len() {
            let g = grad[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            t.data[i] -= lr * cfg.weight_decay * t.data[i];
            t.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// L2 norm over the gradients of all trainable parameters.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter(|p| p.tensor.requires_grad)
        .filter_map(|p| p.tensor.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Momentum SGD with coupled L2 decay and polynomial learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: usize,
    pub poly_power: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.99, weight_decay: 3e-5, total_steps: 1000, poly_power: 0.9, clip_norm: 12.0 }
    }
}

impl SgdConfig {
    /// `lr · (1 − step/total)^power`, clamped at the end of the schedule.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr * (1.0 - frac).powf(self.poly_power)
    }
}

pub fn sgd_step(store: &mut ParamStore, velocity: &mut [Vec<f64>], cfg: &SgdConfig, lr: f64) -> Result<()> {
    if velocity.len() != store.len() {
        return Err(contract("velocity buffers do not match parameter store"));
    }
    let norm = grad_norm(store);
    let clip = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    for (k, p) in store.iter_mut().enumerate() {
        let t = &mut p.tensor;
        if !t.requires_grad {
            continue;
        }
        let Some(grad) = t.grad.as_ref() else {
            return Err(contract(format!("parameter {} has no gradient", p.name)));
        };
        let vel = &mut velocity[k];
        for i in 0..t.data.len() {
            let g = clip * grad[i] + cfg.weight_decay * t.data[i];
            vel[i] = cfg.momentum * vel[i] + g;
            t.data[i] -= lr * vel[i];
        }
    }
    Ok(())
}
