use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    /// Number of inputs feeding one output unit; sets the init scale.
    pub fan_in: usize,
    pub value: Tensor,
}

/// Flat registry of every trainable tensor of a model. Layers refer to their
/// tensors by [`ParamId`], so optimizers and serializers only need this list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, fan_in: usize, shape: &[usize]) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            fan_in,
            value: Tensor::zeros(shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Weights ~ U(-1/√fan_in, 1/√fan_in), biases zero.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for p in &mut self.params {
            match p.role {
                ParamRole::Weight => {
                    let bound = 1.0 / (p.fan_in.max(1) as f64).sqrt();
                    for v in p.value.data_mut() {
                        *v = rng.gen_range(-bound..bound);
                    }
                }
                ParamRole::Bias => p.value.data_mut().fill(0.0),
            }
        }
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            tensors: self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    /// Replaces all values, checking that names and shapes line up.
    pub fn load_values(&mut self, values: Vec<(String, Tensor)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(TensorError::InvalidLayer {
                op: "load parameters",
                reason: format!("expected {} tensors, found {}", self.params.len(), values.len()),
            });
        }
        for (p, (name, t)) in self.params.iter().zip(&values) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load parameters",
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(values) {
            p.value = t;
        }
        Ok(())
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor) {
        for (a, &g) in self.tensors[id.0].data_mut().iter_mut().zip(grad.data()) {
            *a += g;
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0))
    }
}
