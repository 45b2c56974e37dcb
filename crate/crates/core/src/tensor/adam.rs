use serde::{Deserialize, Serialize};

use super::ParameterStore;
use crate::error::{DgaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl ParameterStore {
    /// One bias-corrected Adam update from the current gradient slots.
    /// Gradients are left in place; the caller clears them.
    pub fn adam_step(&mut self, lr: f64, cfg: &AdamConfig) -> Result<()> {
        for e in &self.entries {
            if e.grad.len() != e.value.len() {
                return Err(DgaError::contract(format!(
                    "gradient slot of `{}` has {} values for {} weights",
                    e.name,
                    e.grad.len(),
                    e.value.len()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for e in &mut self.entries {
            let w = e.value.data_mut();
            for i in 0..w.len() {
                let g = e.grad[i];
                let m = cfg.beta1 * e.first_moment[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * e.second_moment[i] + (1.0 - cfg.beta2) * g * g;
                e.first_moment[i] = m;
                e.second_moment[i] = v;
                w[i] -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
