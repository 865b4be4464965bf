//! The epoch loop: seeded mini-batch SGD, validation, plateau schedule and
//! best-checkpoint retention.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::BnMode;
use crate::pipeline::augment::augment_batch;
use crate::pipeline::data::Dataset;
use crate::pipeline::folds::Fold;
use crate::pipeline::loss::cross_entropy;
use crate::pipeline::optim::{sgd_step, CheckpointSelector, PlateauScheduler, SgdState};
use crate::tensor::Scalar;

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}
fn default_patience() -> usize {
    50
}
fn default_factor() -> f64 {
    10.0
}
fn default_floor() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    500
}
fn default_lambda() -> f64 {
    0.01
}
fn default_batch() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// The learning rate is divided by this on a plateau.
    #[serde(default = "default_factor")]
    pub lr_factor: f64,
    #[serde(default = "default_floor")]
    pub lr_floor: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Strength of the ℓ2 penalty on the classifier weights.
    #[serde(default = "default_lambda")]
    pub l2_lambda: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            nesterov: true,
            patience: default_patience(),
            lr_factor: default_factor(),
            lr_floor: default_floor(),
            epochs: default_epochs(),
            l2_lambda: default_lambda(),
            batch_size: default_batch(),
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr) {
            return bad("lr_floor must be in (0, lr]");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.lr_factor > 1.0) {
            return bad("lr_factor must exceed 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.l2_lambda >= 0.0) {
            return bad("l2_lambda must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub const HEADER: &'static str = "epoch,lr,train_loss,train_acc,val_loss,val_acc";

    /// CSV text; floats use the shortest round-trip representation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the retained epoch.
    pub best: Model<T>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub best_val_loss: f64,
    pub history: History,
}

/// Loss, accuracy and predictions of `model` on `indices` in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Inference-mode pass over `indices` in batches. The loss is mean
/// cross-entropy plus the classifier penalty.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    batch_size: usize,
    lambda: f64,
) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::TooFewSamples { detail: "evaluation set is empty".into() });
    }
    let mut ce_sum = 0.0;
    let mut predictions = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let f = model.forward(&x, BnMode::Infer, false)?;
        let (ce, _) = cross_entropy(&f.probs, &y)?;
        ce_sum += ce * chunk.len() as f64;
        predictions.extend(f.predictions());
        labels.extend(y);
    }
    let correct = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
    Ok(Evaluation {
        loss: ce_sum / indices.len() as f64 + model.classifier_penalty(lambda)?,
        accuracy: correct as f64 / indices.len() as f64,
        predictions,
        labels,
    })
}

/// Trains `model` on `fold.train`, validating on `fold.val` after every epoch.
pub fn train<T: Scalar>(mut model: Model<T>, data: &Dataset<T>, fold: &Fold, config: &TrainConfig) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if fold.train.is_empty() || fold.val.is_empty() {
        return Err(Error::TooFewSamples {
            detail: format!("fold {} has {} training and {} validation samples", fold.index, fold.train.len(), fold.val.len()),
        });
    }
    if let Some(&bad) = fold.train.iter().chain(&fold.val).find(|&&i| i >= data.len()) {
        return Err(Error::Config(format!("fold index {bad} out of range for {} samples", data.len())));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut augment_rng = ChaCha8Rng::seed_from_u64(config.seed);
    augment_rng.set_stream(1);
    let mut sgd = SgdState::new();
    let mut plateau = PlateauScheduler::new(config.lr, config.patience, config.lr_factor, config.lr_floor);
    let mut selector = CheckpointSelector::default();
    let mut best = model.clone();
    let mut history = History::default();
    let mut order = fold.train.clone();
    for epoch in 0..config.epochs {
        let lr = plateau.lr;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (mut x, y) = data.batch(chunk)?;
            if config.augment {
                x = augment_batch(&x, &mut augment_rng)?;
            }
            let out = model.loss_and_grads(&x, &y, config.l2_lambda, BnMode::Train)?;
            if !out.loss.is_finite() {
                return Err(Error::DivergedLoss { epoch });
            }
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.forward.predictions().iter().zip(&y).filter(|(p, l)| p == l).count();
            sgd_step(&mut model.params, &out.grads, &mut sgd, lr, config.momentum, config.nesterov)?;
            model.apply_running_updates(out.forward.running_updates)?;
        }
        let val = evaluate(&model, data, &fold.val, config.batch_size, config.l2_lambda)?;
        if !val.loss.is_finite() {
            return Err(Error::DivergedLoss { epoch });
        }
        history.rows.push(HistoryRow {
            epoch,
            lr,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
        });
        if selector.offer(epoch, val.accuracy, val.loss) {
            best = model.clone();
        }
        plateau.step(val.loss);
    }
    Ok(TrainOutcome {
        best,
        best_epoch: selector.epoch.unwrap_or(0),
        best_val_acc: selector.accuracy,
        best_val_loss: selector.loss,
        history,
    })
}
