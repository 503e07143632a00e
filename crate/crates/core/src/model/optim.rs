use serde::{Deserialize, Serialize};

use super::params::{Grads, Params};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Rescales `g` in place so its norm is at most `max`; returns the norm before.
pub fn clip_grad_norm(g: &mut Grads, max: f64) -> f64 {
    let n = g.norm();
    if max > 0.0 && n > max {
        g.scale(max / n);
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    /// One update; returns the gradient norm before clipping.
    pub fn update(&mut self, cfg: &AdamConfig, params: &mut Params, grads: &mut Grads) -> Result<f64> {
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!("gradient at optimizer step {}", self.step)));
        }
        if self.m.len() != params.data.len() {
            return Err(Error::Contract(format!("optimizer state for {} parameters, model has {}", self.m.len(), params.data.len())));
        }
        let norm = clip_grad_norm(grads, cfg.clip_norm);
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for i in 0..params.data.len() {
            let g = grads.data[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            params.data[i] -= cfg.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps);
        }
        params.bump();
        Ok(norm)
    }
}
