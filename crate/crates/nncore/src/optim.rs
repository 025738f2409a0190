//! Adam with a halve-every-N-steps learning rate schedule.

use std::collections::HashMap;

use crate::params::ParamStore;
use crate::NnError;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate is halved every this many completed steps.
    pub halve_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            halve_every: 20_000,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// Optimizer state: per-parameter moments live in the [`ParamStore`];
/// the step counter and schedule live here.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: usize,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Current learning rate: halved once per completed schedule interval.
    pub fn lr(&self) -> f64 {
        self.config.lr * 0.5f64.powi((self.step / self.config.halve_every) as i32)
    }

    /// Apply one update. Every unfrozen trainable parameter must have a
    /// gradient entry; frozen parameters and buffers are skipped (their
    /// moments are untouched).
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &HashMap<String, Vec<f32>>,
    ) -> Result<(), NnError> {
        let names = store.active_names();
        let lr = self.lr() as f32;
        let t = (self.step + 1) as i32;
        let b1 = self.config.beta1 as f32;
        let b2 = self.config.beta2 as f32;
        let eps = self.config.eps as f32;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for name in names {
            let grad = grads
                .get(&name)
                .ok_or_else(|| NnError::MissingGradient(name.clone()))?;
            let param = store.get_mut(&name)?;
            if grad.len() != param.data.len() {
                return Err(NnError::ShapeMismatch(format!(
                    "gradient for {name:?} has {} entries, parameter has {}",
                    grad.len(),
                    param.data.len()
                )));
            }
            for k in 0..param.data.len() {
                let g = grad[k];
                param.m[k] = b1 * param.m[k] + (1.0 - b1) * g;
                param.v[k] = b2 * param.v[k] + (1.0 - b2) * g * g;
                let m_hat = param.m[k] / bias1;
                let v_hat = param.v[k] / bias2;
                param.data[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
