//! Elementwise activations and the softmax cross-entropy output layer.

use ndarray::{Array1, ArrayView1};

use crate::{Error, Real, Result};

/// Elementwise tanh; the returned vector doubles as the backward cache.
pub fn tanh_forward<F: Real>(a: &ArrayView1<F>) -> Array1<F> {
    a.mapv(|v| v.tanh())
}

/// Chain rule through tanh given the forward output `y`.
pub fn tanh_backward(d_out: &ArrayView1<f64>, y: &ArrayView1<f64>) -> Array1<f64> {
    Array1::from_iter(
        d_out
            .iter()
            .zip(y.iter())
            .map(|(&d, &t)| d * (1.0 - t * t)),
    )
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax<F: Real>(logits: &ArrayView1<F>) -> Array1<F> {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps / sum
}

/// Posterior, cross-entropy loss and logit gradient for true class `label`.
///
/// `loss = -log y[label]` computed in log-sum-exp form; the gradient is
/// `y - onehot(label)`.
pub fn softmax_xent_from_logits<F: Real>(
    logits: &ArrayView1<F>,
    label: usize,
) -> Result<(Array1<F>, F, Array1<F>)> {
    if label >= logits.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let shifted = logits.mapv(|v| v - max);
    let exps = shifted.mapv(|v| v.exp());
    let sum = exps.sum();
    let y = &exps / sum;
    let loss = sum.ln() - shifted[label];
    let mut d_logits = y.clone();
    d_logits[label] = d_logits[label] - F::one();
    Ok((y, loss, d_logits))
}

/// Argmax over class posteriors (first index on ties).
pub fn argmax<F: Real>(y: &ArrayView1<F>) -> usize {
    let mut best = 0;
    for i in 1..y.len() {
        if y[i] > y[best] {
            best = i;
        }
    }
    best
}
