//! Bias-corrected adaptive moment estimation with global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::NnError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling applied before every step; `None` disables it.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, clip_norm: Some(10.0) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self { config, first_moment: vec![0.0; num_params], second_moment: vec![0.0; num_params], step_count: 0 }
    }

    /// Clips `grads` in place (if configured) and applies one update.
    /// Returns the pre-clip global norm.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64]) -> Result<f64, NnError> {
        if params.len() != self.first_moment.len() {
            return Err(NnError::Shape { op: "adam params", expected: self.first_moment.len(), got: params.len() });
        }
        if grads.len() != params.len() {
            return Err(NnError::Shape { op: "adam grads", expected: params.len(), got: grads.len() });
        }
        let norm = match self.config.clip_norm {
            Some(max) => clip_global_norm(grads, max),
            None => global_norm(grads),
        };
        self.step_count += 1;
        let AdamConfig { learning_rate, beta1, beta2, epsilon, .. } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            let m = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
            let v = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            params[i] -= learning_rate * (m / c1) / ((v / c2).sqrt() + epsilon);
        }
        Ok(norm)
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so its L2 norm is at most `max_norm`. Returns the
/// original norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
