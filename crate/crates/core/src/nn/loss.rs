use super::layers::softmax_in_place;
use super::tensor::Tensor;
use super::{NnError, Result};

/// Softmax probabilities and `-ln p[label]`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    // log-sum-exp form keeps saturated logits exact.
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    (lse - logits[label], p)
}

/// Mean cross-entropy over a `[B, K]` batch and its gradient `(p - onehot) / B`.
pub fn batch_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let k = match logits.sample_shape() {
        [k] => *k,
        s => return Err(NnError::ShapeMismatch(format!("logits must be [B, K], got {s:?}"))),
    };
    if labels.len() != logits.batch() {
        return Err(NnError::ShapeMismatch(format!(
            "{} labels for a batch of {}",
            labels.len(),
            logits.batch()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::ShapeMismatch(format!("label {bad} out of range for {k} classes")));
    }
    let n = labels.len() as f64;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let (loss, mut p) = softmax_cross_entropy(logits.sample(b), label);
        total += loss;
        p[label] -= 1.0;
        for (g, v) in grad.sample_mut(b).iter_mut().zip(p) {
            *g = v / n;
        }
    }
    Ok((total / n, grad))
}
