//! Dense f64 tensors and a small reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain value: a shape and a row-major buffer. Differentiable
//! computation happens on a [`Tape`], which records every operation applied to
//! [`Var`] handles and replays them backwards in [`Tape::backward`].
//!
//! Only the operations the multi-view model and its losses need are provided.
//! There is no general broadcasting.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, grad_check_many};
pub use tape::{Gradients, Tape, Var};

use crate::error::{dim_err, Error, Result};

/// Stability constant used inside logarithms and as the KL clamp floor.
pub const EPS: f64 = 1e-8;

/// Tolerance used when validating that a vector is a probability distribution.
pub const NORM_TOL: f64 = 1e-9;

/// Shape-typed dense array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(dim_err!("shape {shape:?} must be non-empty with positive sizes"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(dim_err!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Self {
        assert!(!values.is_empty(), "vector tensors must be non-empty");
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// 2-D tensor from nested rows; all rows must have the same length.
    pub fn matrix(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err!("ragged matrix rows"));
        }
        Tensor::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// One-hot vector of length `k`.
    pub fn one_hot(label: usize, k: usize) -> Result<Self> {
        if label >= k {
            return Err(Error::Index(format!("label {label} out of range for {k} classes")));
        }
        let mut t = Tensor::zeros(&[k]);
        t.data[label] = 1.0;
        Ok(t)
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

    /// Same data, new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Row `r` of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Temperature-scaled softmax of a single logit row, max-subtracted.
pub fn softmax_values(logits: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, tau, &mut out);
    out
}

pub(crate) fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Checks that `p` is nonnegative and sums to one within [`NORM_TOL`].
pub fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::Contract(format!("{what} has negative or non-finite entries")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > NORM_TOL {
        return Err(Error::Contract(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

/// Σ p_i ln(p_i / max(q_i, EPS)), with 0·ln(0/·) = 0.
pub fn kl_value(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(EPS)).ln())
        .sum()
}

/// −Σ p_i ln(p_i + eps). With `eps == 0` zero entries contribute nothing.
pub fn entropy_value(p: &[f64], eps: f64) -> f64 {
    -p.iter()
        .filter(|&&pi| pi > 0.0 || eps > 0.0)
        .map(|&pi| pi * (pi + eps).ln())
        .sum::<f64>()
}

/// −Σ q_i ln(p_i + eps) for a target distribution `q` (usually one-hot).
pub fn cross_entropy_value(p: &[f64], q: &[f64], eps: f64) -> f64 {
    -p.iter()
        .zip(q)
        .filter(|(_, &qi)| qi != 0.0)
        .map(|(&pi, &qi)| qi * (pi + eps).ln())
        .sum::<f64>()
}
