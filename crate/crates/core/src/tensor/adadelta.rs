//! Adadelta with a global learning-rate multiplier and L2 weight decay.
//!
//! ```text
//! g'      = g + weight_decay * w          (weights only)
//! E[g²]   = rho * E[g²] + (1 - rho) * g'²
//! Δ       = sqrt(E[Δ²] + eps) / sqrt(E[g²] + eps) * g'
//! E[Δ²]   = rho * E[Δ²] + (1 - rho) * Δ²
//! w       = w - lr * Δ
//! ```

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamRole, ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdadeltaConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            rho: 0.95,
            epsilon: 1e-6,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adadelta {
    config: AdadeltaConfig,
    sq_grad: Vec<Vec<f64>>,
    sq_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(config: AdadeltaConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            config,
            sq_grad: zeros.clone(),
            sq_update: zeros,
        }
    }

    pub fn config(&self) -> &AdadeltaConfig {
        &self.config
    }

    pub fn sq_grad(&self) -> &[Vec<f64>] {
        &self.sq_grad
    }

    pub fn sq_update(&self) -> &[Vec<f64>] {
        &self.sq_update
    }

    /// Applies one update. Gradients are validated before anything is
    /// modified, so a non-finite gradient leaves parameters and state intact.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.tensors().len() != store.len() || self.sq_grad.len() != store.len() {
            return Err(TensorError::InvalidLayer {
                op: "adadelta",
                reason: "gradient/parameter/state counts differ".into(),
            });
        }
        for (p, g) in store.params().iter().zip(grads.tensors()) {
            if p.value.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adadelta",
                    expected: p.value.shape().to_vec(),
                    found: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(TensorError::NonFiniteGradient { param: p.name.clone() });
            }
        }
        let AdadeltaConfig {
            learning_rate,
            rho,
            epsilon,
            weight_decay,
        } = self.config;
        for (i, (p, g)) in store.params_mut().iter_mut().zip(grads.tensors()).enumerate() {
            let decay = if p.role == ParamRole::Weight { weight_decay } else { 0.0 };
            let acc_g = &mut self.sq_grad[i];
            let acc_d = &mut self.sq_update[i];
            for (j, (w, &gv)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gv + decay * *w;
                acc_g[j] = rho * acc_g[j] + (1.0 - rho) * g * g;
                let delta = (acc_d[j] + epsilon).sqrt() / (acc_g[j] + epsilon).sqrt() * g;
                acc_d[j] = rho * acc_d[j] + (1.0 - rho) * delta * delta;
                *w -= learning_rate * delta;
            }
        }
        Ok(())
    }
}
