use crate::error::{Error, Result};
use crate::nn::flops;
use crate::tensor::{Scalar, Tensor};

/// Floor on the ℓ2 norm.
pub const L2_EPS: f64 = 1e-12;
/// Added to `2√|x|` in the signed-sqrt derivative so it stays finite at 0.
pub const SSQRT_GRAD_EPS: f64 = 1e-8;

fn rows<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() < 2 {
        return Err(Error::shape("normalize_bilinear", format!("expected a batch, got {:?}", t.shape())));
    }
    let n = t.shape()[0];
    Ok((n, t.len() / n))
}

/// Flattens each sample row-major, applies `sign(x)·√|x|` and scales to unit
/// ℓ2 norm. Rows that are identically zero stay zero. `(N, ...) → (N, L)`.
pub fn normalize_bilinear<T: Scalar>(pooled: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, len) = rows(pooled)?;
    let eps = T::from_f64(L2_EPS);
    let mut out = Vec::with_capacity(pooled.len());
    for row in pooled.data().chunks_exact(len) {
        let y: Vec<T> = row.iter().map(|&x| signed_sqrt(x)).collect();
        let norm = y.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        let denom = norm.max(eps);
        out.extend(y.into_iter().map(|v| v / denom));
    }
    flops::record(flops::normalize(pooled.len()));
    Tensor::new(vec![n, len], out)
}

fn signed_sqrt<T: Scalar>(x: T) -> T {
    if x < T::zero() {
        -(-x).sqrt()
    } else {
        x.sqrt()
    }
}

/// Gradient of [`normalize_bilinear`] with respect to its input, returned in
/// the input's shape.
pub fn normalize_bilinear_backward<T: Scalar>(pooled: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, len) = rows(pooled)?;
    if grad_out.shape() != [n, len] {
        return Err(Error::shape("normalize_bilinear_backward", format!("upstream {:?}", grad_out.shape())));
    }
    let eps = T::from_f64(L2_EPS);
    let two = T::from_f64(2.0);
    let dsq_eps = T::from_f64(SSQRT_GRAD_EPS);
    let mut out = Vec::with_capacity(pooled.len());
    for (row, g) in pooled.data().chunks_exact(len).zip(grad_out.data().chunks_exact(len)) {
        let y: Vec<T> = row.iter().map(|&x| signed_sqrt(x)).collect();
        let norm = y.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        let dy: Vec<T> = if norm > eps {
            let z: Vec<T> = y.iter().map(|&v| v / norm).collect();
            let dot = z.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            g.iter().zip(&z).map(|(&gi, &zi)| (gi - zi * dot) / norm).collect()
        } else {
            g.iter().map(|&gi| gi / eps).collect()
        };
        out.extend(
            row.iter()
                .zip(dy)
                .map(|(&x, d)| d / (two * x.abs().sqrt() + dsq_eps)),
        );
    }
    Tensor::new(pooled.shape().to_vec(), out)
}

/// Row-wise softmax of `(N, M)` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.rank() != 2 {
        return Err(Error::shape("softmax", format!("expected (N,M), got {:?}", logits.shape())));
    }
    let m = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.data().chunks_exact(m) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / sum));
    }
    flops::record(flops::softmax(logits.len()));
    Tensor::new(logits.shape().to_vec(), out)
}
