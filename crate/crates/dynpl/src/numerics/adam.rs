use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{DynplError, Result};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state. Moment buffers are kept per named parameter group
/// and lazily allocated to the group's shape on first use.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Advance the shared step counter. Call once per optimizer step, before
    /// updating the parameter groups belonging to that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Standard bias-corrected Adam update for one parameter group.
    pub fn update(&mut self, name: &str, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(DynplError::Numerics(format!(
                "adam: shape mismatch for '{name}'"
            )));
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(DynplError::Numerics(format!(
                "adam: non-finite gradient in '{name}' at index {bad}"
            )));
        }
        assert!(self.step > 0, "begin_step must be called before update");
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; params.len()], vec![0.0; params.len()]));
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grads[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= c.rate * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}
