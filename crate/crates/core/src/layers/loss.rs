use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over a batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// `[N, K]` class probabilities.
    pub probs: Tensor,
    /// Gradient of `loss` with respect to the logits.
    pub grad: Tensor,
    pub correct: usize,
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<LossOutput> {
    let &[n, k] = logits.shape() else {
        return Err(Error::invalid(format!(
            "logits must be [N, K], got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != n || n == 0 {
        return Err(Error::invalid(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {bad} outside {k} classes")));
    }
    let mut probs = vec![0.0; n * k];
    let mut grad = vec![0.0; n * k];
    let mut total = 0.0;
    let mut correct = 0;
    for (i, row) in logits.data().chunks(k).enumerate() {
        let mut top = 0;
        for j in 1..k {
            if row[j] > row[top] {
                top = j;
            }
        }
        if top == labels[i] {
            correct += 1;
        }
        let max = row[top];
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = z.ln() + max;
        total += log_z - row[labels[i]];
        for j in 0..k {
            let p = (row[j] - log_z).exp();
            probs[i * k + j] = p;
            grad[i * k + j] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok(LossOutput {
        loss: total / n as f64,
        probs: Tensor::new([n, k], probs)?,
        grad: Tensor::new([n, k], grad)?,
        correct,
    })
}
