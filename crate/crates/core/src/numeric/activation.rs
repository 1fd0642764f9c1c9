//! Scalar and element-wise activations plus a numerically stable softmax.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Negative slope used for attention coefficients.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu_tensor(x: &Tensor) -> Tensor {
    x.map(relu)
}

pub fn leaky_relu_tensor(x: &Tensor, slope: f64) -> Tensor {
    x.map(|v| leaky_relu(v, slope))
}

pub fn sigmoid_tensor(x: &Tensor) -> Tensor {
    x.map(sigmoid)
}

/// Softmax with max-subtraction.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut out = vec![0.0; scores.len()];
    softmax_into(scores, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
