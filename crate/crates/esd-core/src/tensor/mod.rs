//! Dense tensors and reverse-mode automatic differentiation.
//!
//! Everything is `f64` and row-major. The compute graph lives in [`Tape`];
//! layer types in [`layers`] own their parameters as plain [`Tensor`]s and
//! are pushed onto a tape per forward pass.

mod checkpoint;
mod kernels;
mod layers;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use layers::{Conv1dLayer, ConvSpec, ConvTranspose1dLayer, ResidualBlock};
pub use tape::{Tape, VarId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {context}: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{context}: empty time axis")]
    EmptyTime { context: &'static str },
    #[error("invalid {what}: {details}")]
    Invalid { what: &'static str, details: String },
}

/// Dense row-major tensor. Gradient storage is allocated lazily and always
/// matches the value shape.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Gradient accumulated by [`Tape::backward`] harvests, zeros until touched.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_wrong_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            TensorError::LengthMismatch { shape, len } => {
                assert_eq!(shape, vec![2, 3]);
                assert_eq!(len, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn grad_matches_value_shape() {
        let mut t = Tensor::zeros(vec![4, 7]);
        t.grad_mut()[3] = 1.5;
        assert_eq!(t.grad().unwrap().len(), t.numel());
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&v| v == 0.0));
    }
}
