//! AdamW with a warmup + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Fraction of the total steps spent in linear warmup.
    pub warmup_frac: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1, warmup_frac: 0.01, grad_clip: 1.0 }
    }
}

/// Learning rate at `step` (0-based) of `total`.
pub fn cosine_lr(step: usize, total: usize, base: f64, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    decay_mask: Vec<bool>,
}

impl AdamW {
    /// `decay` lists `(start, len)` ranges that get weight decay.
    pub fn new(cfg: AdamWConfig, n: usize, decay: &[(usize, usize)]) -> Self {
        let mut decay_mask = vec![false; n];
        for &(s, l) in decay {
            decay_mask[s..s + l].fill(true);
        }
        Self { cfg, m: vec![0.0; n], v: vec![0.0; n], t: 0, decay_mask }
    }

    /// Clips `grad` in place; returns the norm before clipping.
    pub fn clip(&self, grad: &mut [f64]) -> f64 {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let s = self.cfg.grad_clip / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        norm
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            if self.decay_mask[i] {
                params[i] -= lr * weight_decay * params[i];
            }
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
}
