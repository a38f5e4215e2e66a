//! Dense row-major `f64` tensors and the small set of differentiable layers
//! the landmark regressors are built from.
//!
//! Activations use height × width × channel layout. Convolution kernels are
//! stored as `kh × kw × cin × cout` and fully connected weights as
//! `inputs × outputs`, so every inner loop walks contiguous memory.

mod adadelta;
pub mod gradcheck;
pub mod container;
mod ops;
mod params;
mod sequential;

pub use adadelta::{Adadelta, AdadeltaConfig};
pub use ops::{
    conv2d_backward, conv2d_forward, conv_output_len, fc_backward, fc_forward, maxpool2d_backward,
    maxpool2d_forward, pool_output_len, relu_backward, relu_forward, ConvGrads, FcGrads, Padding,
    PoolOutput,
};
pub use params::{Gradients, Param, ParamId, ParamRole, ParamStore};
pub use sequential::{Layer, LayerSpec, Sequential, Tape};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?} but found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid tensor shape {shape:?} for {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("{op}: {reason}")]
    InvalidLayer { op: &'static str, reason: String },
    #[error("backward called without a recorded forward pass")]
    NoForwardRecord,
    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// An n-dimensional array of reals in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::InvalidShape {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as an image volume `(height, width, channels)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(TensorError::InvalidShape {
                shape: self.shape.clone(),
                len: self.data.len(),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates `(h, w, c_i)` volumes along the channel axis.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(TensorError::InvalidLayer {
            op: "concat_channels",
            reason: "no inputs".into(),
        })?;
        let (h, w, _) = first.dims3()?;
        let mut total_c = 0;
        for p in parts {
            let (ph, pw, pc) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    expected: first.shape.clone(),
                    found: p.shape.clone(),
                });
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(h * w * total_c);
        for pix in 0..h * w {
            for p in parts {
                let c = p.shape[2];
                data.extend_from_slice(&p.data[pix * c..(pix + 1) * c]);
            }
        }
        Tensor::new(vec![h, w, total_c], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn concat_interleaves_channels() {
        let a = Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_channels(&[a, b]).unwrap();
        assert_eq!(c.shape(), &[1, 2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
