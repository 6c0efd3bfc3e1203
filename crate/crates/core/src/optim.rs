//! Adam with optional decoupled weight decay (AdamW).

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// One bias-corrected Adam update of `theta` in place. Rejects non-finite
/// gradients without touching the state.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64], cfg: &AdamConfig) -> Result<()> {
    check_dim(theta.len(), grad.len())?;
    check_dim(theta.len(), state.m.len())?;
    check_finite(grad, "gradient")?;
    state.step += 1;
    let k = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(k);
    let bc2 = 1.0 - cfg.beta2.powi(k);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
    Ok(())
}
