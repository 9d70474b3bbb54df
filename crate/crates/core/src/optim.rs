//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! linear-warmup + cosine-restart learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{MaaError, Result};
use crate::numcore::{Matrix, ParamTensor, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment estimates for each parameter, in parameter-registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &[&ParamTensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        AdamW {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update. Parameters whose `decay` flag is false skip weight decay.
    pub fn step(&mut self, params: Vec<&mut ParamTensor<T>>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(MaaError::Config(format!("learning rate {lr} must be non-negative")));
        }
        if params.len() != self.m.len() {
            return Err(MaaError::shape(
                "adamw_step",
                format!("{} parameters, optimizer tracks {}", params.len(), self.m.len()),
            ));
        }
        let c = self.config;
        self.t += 1;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let corr1 = T::of(1.0 - c.beta1.powf(self.t as f64));
        let corr2 = T::of(1.0 - c.beta2.powf(self.t as f64));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            if p.value.shape() != m.shape() {
                return Err(MaaError::shape(
                    "adamw_step",
                    format!("{}: {:?} vs state {:?}", p.name, p.value.shape(), m.shape()),
                ));
            }
            let wd = T::of(if p.decay { c.weight_decay } else { 0.0 });
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grads[i];
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + one_b1 * g;
                let m_hat = *mi / corr1;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + one_b2 * g * g;
                let v_hat = *vi / corr2;
                values[i] -= lr_t * (m_hat / (v_hat.sqrt() + eps) + wd * values[i]);
            }
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(params: Vec<&mut ParamTensor<T>>, max_norm: f64) -> Result<f64> {
    let norm = params.iter().map(|p| p.grad.norm_sq().as_f64()).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(MaaError::NonFinite { op: "grad_norm".into() });
    }
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for p in params {
            p.grad.scale(s);
        }
    }
    Ok(norm)
}

/// Schedule lengths are in optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub t0: u64,
    pub t_mult: u64,
    pub eta_min: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 3e-5,
            warmup_steps: 0,
            t0: 10,
            t_mult: 2,
            eta_min: 0.0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.eta_min >= 0.0) {
            return Err(MaaError::Config("learning rates must be non-negative".into()));
        }
        if self.t0 < 1 || self.t_mult < 1 {
            return Err(MaaError::Config("t0 and t_mult must be at least 1".into()));
        }
        Ok(())
    }

    /// `(offset, length)` of `s` within its restart cycle.
    fn cycle_position(&self, mut s: u64) -> (u64, u64) {
        if self.t_mult == 1 {
            return (s % self.t0, self.t0);
        }
        let mut len = self.t0;
        while s >= len {
            s -= len;
            len = len.saturating_mul(self.t_mult);
        }
        (s, len)
    }
}

pub fn lr_at(step: u64, cfg: &ScheduleConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.base_lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let (cur, len) = cfg.cycle_position(step - cfg.warmup_steps);
    let phase = std::f64::consts::PI * cur as f64 / len as f64;
    cfg.eta_min + (cfg.base_lr - cfg.eta_min) * (1.0 + phase.cos()) / 2.0
}
