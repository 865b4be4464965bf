//! Training-time augmentation: horizontal flip and circular shift.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Largest shift as a fraction of each spatial axis.
pub const MAX_SHIFT_FRACTION: f64 = 0.1;

fn hwc<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<[usize; 3]> {
    match *t.shape() {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::shape(op, format!("expected (H,W,C), got {:?}", t.shape()))),
    }
}

/// Mirrors an `(H, W, C)` sample along the width axis.
pub fn flip_horizontal<T: Scalar>(sample: &Tensor<T>) -> Result<Tensor<T>> {
    let [h, w, c] = hwc("flip_horizontal", sample)?;
    let src = sample.data();
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in (0..w).rev() {
            out.extend_from_slice(&src[(y * w + x) * c..][..c]);
        }
    }
    Tensor::new(sample.shape().to_vec(), out)
}

/// Rolls an `(H, W, C)` sample by `(dy, dx)` pixels with wrap-around.
pub fn circular_shift<T: Scalar>(sample: &Tensor<T>, dy: isize, dx: isize) -> Result<Tensor<T>> {
    let [h, w, c] = hwc("circular_shift", sample)?;
    let src = sample.data();
    let mut out = vec![T::zero(); src.len()];
    for y in 0..h {
        let ty = (y as isize + dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let tx = (x as isize + dx).rem_euclid(w as isize) as usize;
            out[(ty * w + tx) * c..][..c].copy_from_slice(&src[(y * w + x) * c..][..c]);
        }
    }
    Tensor::new(sample.shape().to_vec(), out)
}

/// Independent 50% horizontal flip, then a circular shift drawn uniformly
/// from `±⌊0.1·H⌋` rows and `±⌊0.1·W⌋` columns.
pub fn augment<T: Scalar, R: Rng>(sample: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    let [h, w, _] = hwc("augment", sample)?;
    let flip = rng.random_bool(0.5);
    let my = (h as f64 * MAX_SHIFT_FRACTION).floor() as i64;
    let mx = (w as f64 * MAX_SHIFT_FRACTION).floor() as i64;
    let dy = rng.random_range(-my..=my);
    let dx = rng.random_range(-mx..=mx);
    let s = if flip { flip_horizontal(sample)? } else { sample.clone() };
    circular_shift(&s, dy as isize, dx as isize)
}

/// Applies [`augment`] to every sample of an `(N, H, W, C)` batch.
pub fn augment_batch<T: Scalar, R: Rng>(batch: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    if batch.rank() != 4 {
        return Err(Error::shape("augment_batch", format!("expected (N,H,W,C), got {:?}", batch.shape())));
    }
    let n = batch.shape()[0];
    let items = (0..n)
        .map(|i| augment(&batch.batch_slice(i, 1)?.reshape(&batch.shape()[1..])?, rng))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items.iter().collect::<Vec<_>>())
}
