//! Dense tensors with reverse-mode differentiation.
//!
//! The substrate for every encoder, loss and explanation in this crate:
//! row-major `f64` storage with explicit shape metadata, and a [`Tape`]
//! that records forward operations so gradients can be replayed in
//! reverse. Slicing and reshaping copy; nothing aliases during backward.

mod grad_check;
mod kernels;
mod tape;
#[cfg(test)]
mod tests;

pub use grad_check::{grad_check, grad_check_multi, CoordSelection};
pub use tape::{Mode, Tape, TensorId};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense n-dimensional real array, row-major.
///
/// `requires_grad` marks trainable leaves; `grad`, when populated by a
/// backward pass (or an optimizer harvest), always matches `data` in length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeData {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> TensorResult<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            if r.len() != n {
                return Err(TensorError::Dim("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![m, n], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Element accessor for 2-D tensors.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Zeroes the gradient buffer, allocating it if absent.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }
}
