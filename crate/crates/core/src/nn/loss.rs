use super::Tensor;
use crate::error::{Error, Result};

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-log p_label`, computed through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// Mean cross-entropy over a `[B, K]` batch and its gradient `(p - onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_rank(2, "cross entropy")?;
    let (b, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != b {
        return Err(Error::Dimension(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    for (bi, (row, &y)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        loss += cross_entropy(row, y)?;
        let p = softmax(row);
        let g = &mut grad.data_mut()[bi * k..(bi + 1) * k];
        for (j, (gv, pv)) in g.iter_mut().zip(p).enumerate() {
            *gv = (pv - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}
