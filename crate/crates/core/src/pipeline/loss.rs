use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Probabilities are clamped here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean categorical cross-entropy of softmax outputs `probs (N, M)` against
/// integer labels, and the gradient with respect to the logits, `(p − y)/N`.
pub fn cross_entropy<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    if probs.rank() != 2 || probs.shape()[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("probs {:?} vs {} labels", probs.shape(), labels.len()),
        ));
    }
    let (n, m) = (probs.shape()[0], probs.shape()[1]);
    let inv_n = T::one() / T::from_usize(n);
    let mut loss = 0f64;
    let mut grad = probs.data().to_vec();
    for (row, &label) in labels.iter().enumerate() {
        if label >= m {
            return Err(Error::LabelOutOfRange { label, n_classes: m });
        }
        let p = probs.data()[row * m + label].as_f64().max(PROB_FLOOR);
        loss -= p.ln();
        grad[row * m + label] -= T::one();
    }
    grad.iter_mut().for_each(|g| *g *= inv_n);
    Ok((loss / n as f64, Tensor::new(vec![n, m], grad)?))
}
