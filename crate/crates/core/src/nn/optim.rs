//! AdamW with global-norm clipping, and the warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamWConfig) -> Self {
        Self { config, m: params.zeros_like(), v: params.zeros_like(), step_count: 0 }
    }

    /// One update. `grads` are in the parameter set's name order.
    ///
    /// Gradients are clipped to the global norm threshold before entering the
    /// moments; weight decay `p ← p − lr·wd·p` is applied separately from the
    /// Adam step. Non-finite gradients reject the step and leave all state untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<StepStats, NnError> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(NnError::Invalid(format!(
                "{} gradients for {} parameters ({} moments)",
                grads.len(),
                params.len(),
                self.m.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NnError::Shape { op: "adamw", left: p.shape().to_vec(), right: g.shape().to_vec() });
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(NnError::NonFinite(format!("gradient of {name}")));
            }
        }
        let c = self.config;
        let norm = global_norm(grads);
        let factor = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (((p, g), m), v) in params.values_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (ps, gs) = (p.as_slice_mut().unwrap(), g.as_slice().unwrap());
            let (ms, vs) = (m.as_slice_mut().unwrap(), v.as_slice_mut().unwrap());
            for i in 0..ps.len() {
                let gi = gs[i] * factor;
                ms[i] = c.beta1 * ms[i] + (1.0 - c.beta1) * gi;
                vs[i] = c.beta2 * vs[i] + (1.0 - c.beta2) * gi * gi;
                let update = (ms[i] / bc1) / ((vs[i] / bc2).sqrt() + c.eps);
                ps[i] -= lr * c.weight_decay * ps[i] + lr * update;
            }
        }
        Ok(StepStats { grad_norm: norm, clipped_norm: norm * factor })
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to 0 at `total_steps`.
pub fn cosine_warmup_lr(step: u64, warmup: u64, total_steps: u64, base_lr: f64) -> Result<f64, NnError> {
    if step > total_steps {
        return Err(NnError::Invalid(format!("step {step} beyond total {total_steps}")));
    }
    if warmup > total_steps {
        return Err(NnError::Invalid(format!("warmup {warmup} beyond total {total_steps}")));
    }
    if step <= warmup {
        return Ok(if warmup == 0 { base_lr } else { base_lr * step as f64 / warmup as f64 });
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
