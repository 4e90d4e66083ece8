//! Cross-entropy losses computed from logits.

use super::layers::sigmoid_scalar;
use super::tensor::Tensor;
use crate::error::{PimError, Result};

/// Mean binary cross-entropy over every element, from logits.
///
/// Uses `max(z, 0) - z t + ln(1 + e^{-|z|})`. Returns the loss and its
/// gradient with respect to the logits.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    targets.expect_shape(logits.shape())?;
    let n = logits.len();
    if n == 0 {
        return Err(PimError::EmptyInput("bce logits"));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (&z, &t) in logits.data().iter().zip(targets.data()) {
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad.push((sigmoid_scalar(z) - t) / n as f64);
    }
    Ok((loss / n as f64, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean categorical cross-entropy of `logits: [batch, classes]` against class ids.
pub fn ce_loss(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_ndim(2, "ce logits")?;
    let (batch, classes) = (logits.dim(0), logits.dim(1));
    if targets.len() != batch {
        return Err(PimError::LengthMismatch(targets.len(), batch));
    }
    if batch == 0 {
        return Err(PimError::EmptyInput("ce batch"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(PimError::IndexOutOfRange {
            index: bad,
            len: classes,
        });
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (row, &t) in logits.rows().zip(targets) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[t];
        for (j, v) in row.iter().enumerate() {
            let p = (v - lse).exp();
            let indicator = if j == t { 1.0 } else { 0.0 };
            grad.push((p - indicator) / batch as f64);
        }
    }
    Ok((
        loss / batch as f64,
        Tensor::new(logits.shape().to_vec(), grad)?,
    ))
}
