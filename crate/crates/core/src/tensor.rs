//! Dense double-precision tensors in row-major order.
//!
//! A `Tensor` is a plain value: construction validates the shape/data
//! contract and finiteness, after which the buffer is immutable except
//! through [`Tensor::data_mut`], which exists solely for optimizer
//! updates. Gradients are tracked on the tape (see `tape`); the `grad`
//! slot here receives a copy when a caller extracts gradients for a leaf.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip, default)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {expect} values, got {}", data.len()),
            ));
        }
        check_finite("tensor", &data)?;
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    /// Construction from parts the caller has already validated; the tape
    /// runs its own finiteness check when the value is recorded.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0));
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    /// All-zeros tensor. Panics on a zero extent; shapes here are always
    /// computed, not user input.
    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "zeros: extents must be positive, got {shape:?}"
        );
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len], grad: None, requires_grad: false }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![v], grad: None, requires_grad: false }
    }

    pub fn vector(data: Vec<f64>) -> Result<Tensor> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Gaussian init, mean 0. Used for parameter and stub-encoder weights.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let mut t = Tensor::zeros(shape);
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        for v in t.data.iter_mut() {
            *v = normal.sample(rng);
        }
        t
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Tensor {
        let mut t = Tensor::zeros(shape);
        for v in t.data.iter_mut() {
            *v = rng.gen_range(lo..hi);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // positive extents are enforced at construction
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place mutation, reserved for optimizer updates.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(self.shape.iter()).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} (extent {ext})");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn with_requires_grad(mut self, on: bool) -> Tensor {
        self.requires_grad = on;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) {
        assert_eq!(grad.len(), self.data.len(), "grad length must match data");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub(crate) fn check_finite(op: &str, data: &[f64]) -> Result<()> {
    for (index, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { op: op.to_string(), index });
        }
    }
    Ok(())
}
