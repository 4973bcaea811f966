//! Adam optimizer over a [`ParamSet`].

use crate::error::{Error, Result};
use crate::param::ParamSet;

#[derive(Debug, Clone, Copy)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

/// Bias-corrected Adam. Moment state is kept per parameter name; parameters
/// with `trainable == false` are never touched.
pub struct Adam {
    cfg: OptimizerConfig,
    step: u64,
    // (name, first moment, second moment), in first-seen order
    state: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter in the set. Requires each
    /// trainable parameter to carry a gradient; clears all gradients after
    /// applying the update.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step += 1;
        let OptimizerConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        for p in params.iter_mut() {
            if !p.trainable {
                debug_assert!(
                    p.tensor.grad.is_none(),
                    "frozen parameter carries a gradient"
                );
                continue;
            }
            let grad = p.tensor.grad.take().ok_or_else(|| {
                Error::Numeric(format!("trainable parameter {} has no gradient", p.name))
            })?;
            let (m, v) = self.moments(&p.name, grad.len());
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.tensor.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    fn moments(&mut self, name: &str, len: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
        let pos = match self.state.iter().position(|(n, _, _)| n == name) {
            Some(pos) => pos,
            None => {
                self.state
                    .push((name.to_string(), vec![0.0; len], vec![0.0; len]));
                self.state.len() - 1
            }
        };
        let entry = &mut self.state[pos];
        (&mut entry.1, &mut entry.2)
    }
}
