//! Softmax cross-entropy with a log-sum-exp stable formulation.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Mean cross-entropy loss over the batch plus the per-sample logit
/// gradient, i.e. row k of `dl_dy` is `softmax(y(k)) − onehot(c(k))` before
/// any batch averaging.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let b = logits.rows();
    let n = logits.cols();
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&c| c >= n) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {n} classes"
        )));
    }
    let mut dl_dy = Matrix::zeros(b, n);
    let mut loss = 0.0;
    for k in 0..b {
        let row = logits.row(k);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &y) in row.iter().enumerate() {
            let e = (y - max).exp();
            sum += e;
            dl_dy.set(k, j, e);
        }
        for j in 0..n {
            dl_dy.set(k, j, dl_dy.get(k, j) / sum);
        }
        let c = labels[k];
        loss += max + sum.ln() - row[c];
        dl_dy.set(k, c, dl_dy.get(k, c) - 1.0);
    }
    Ok((loss / b as f64, dl_dy))
}

/// Softmax of a single logit vector.
pub fn softmax(y: &[f64]) -> Vec<f64> {
    let max = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = y.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
