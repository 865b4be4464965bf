//! SGD with (Nesterov) momentum, the plateau learning-rate schedule and the
//! checkpoint selection rule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::Gradients;
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Per-parameter velocity buffers, created lazily as zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        SgdState { velocity: IndexMap::new() }
    }
}

/// One update of every parameter named in `grads`:
/// `v ← μv − lr·g`, then `w ← w + μv − lr·g` (Nesterov) or `w ← w + v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut SgdState<T>,
    lr: f64,
    momentum: f64,
    nesterov: bool,
) -> Result<()> {
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    for (name, g) in grads {
        let w = params.get_mut(name)?;
        if w.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("{name}: parameter {:?} vs gradient {:?}", w.shape(), g.shape()),
            ));
        }
        let v = state.velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = mu * *vi - lr * gi;
            if nesterov {
                *wi += mu * *vi - lr * gi;
            } else {
                *wi += *vi;
            }
        }
    }
    Ok(())
}

/// Divides the learning rate when the monitored loss has not strictly
/// improved for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub patience: usize,
    pub factor: f64,
    pub floor: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64, floor: f64) -> Self {
        PlateauScheduler { lr, patience, factor, floor, best: f64::INFINITY, wait: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Feeds one epoch's loss and returns the learning rate for the next epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr = (self.lr / self.factor).max(self.floor);
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Tracks the epoch with the best validation accuracy, ties broken by the
/// lower validation loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointSelector {
    pub epoch: Option<usize>,
    pub accuracy: f64,
    pub loss: f64,
}

impl Default for CheckpointSelector {
    fn default() -> Self {
        CheckpointSelector { epoch: None, accuracy: f64::NEG_INFINITY, loss: f64::INFINITY }
    }
}

impl CheckpointSelector {
    /// Returns true when this epoch becomes the retained checkpoint.
    pub fn offer(&mut self, epoch: usize, accuracy: f64, loss: f64) -> bool {
        let better = accuracy > self.accuracy || (accuracy == self.accuracy && loss < self.loss);
        if better {
            *self = CheckpointSelector { epoch: Some(epoch), accuracy, loss };
        }
        better
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn single(w: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full(&[1], w), ParamKind::Trainable).unwrap();
        p
    }

    fn grad(g: f64) -> Gradients<f64> {
        let mut m = IndexMap::new();
        m.insert("w".to_string(), Tensor::full(&[1], g));
        m
    }

    #[test]
    fn nesterov_hand_example() {
        let mut p = single(1.0);
        let mut s = SgdState::new();
        sgd_step(&mut p, &grad(1.0), &mut s, 0.1, 0.5, true).unwrap();
        assert!((s.velocity["w"].data()[0] + 0.1).abs() < 1e-15);
        assert!((p.get("w").unwrap().data()[0] - 0.85).abs() < 1e-15);
    }

    #[test]
    fn fixed_point_and_plain_sgd() {
        let mut p = single(2.0);
        let mut s = SgdState::new();
        sgd_step(&mut p, &grad(0.0), &mut s, 0.1, 0.5, true).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 2.0);
        for nesterov in [true, false] {
            let mut p = single(2.0);
            sgd_step(&mut p, &grad(3.0), &mut SgdState::new(), 0.1, 0.0, nesterov).unwrap();
            assert!((p.get("w").unwrap().data()[0] - 1.7).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut p = single(1.0);
        let mut g = IndexMap::new();
        g.insert("w".to_string(), Tensor::full(&[2], 1.0));
        assert!(matches!(
            sgd_step(&mut p, &g, &mut SgdState::new(), 0.1, 0.5, true),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn plateau_sequence() {
        let mut s = PlateauScheduler::new(0.01, 50, 10.0, 1e-4);
        let mut lrs = Vec::new();
        for _ in 0..200 {
            lrs.push(s.step(1.0));
        }
        assert_eq!(lrs[49], 0.01);
        assert!((lrs[50] - 0.001).abs() < 1e-15);
        assert!((lrs[100] - 0.0001).abs() < 1e-15);
        assert!((lrs[199] - 0.0001).abs() < 1e-15);

        let mut s = PlateauScheduler::new(0.01, 50, 10.0, 1e-4);
        assert!((0..500).all(|e| s.step(1.0 - e as f64 * 1e-3) == 0.01));
    }

    #[test]
    fn checkpoint_rule() {
        let mut c = CheckpointSelector::default();
        let trace = [(0.5, 1.0), (0.7, 0.9), (0.7, 0.8), (0.6, 0.1), (0.7, 0.85)];
        for (e, (a, l)) in trace.into_iter().enumerate() {
            c.offer(e, a, l);
        }
        assert_eq!(c.epoch, Some(2));
    }
}
