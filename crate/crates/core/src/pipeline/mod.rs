//! Data generation, fold splitting, optimization and the training loop.

pub mod augment;
pub mod data;
pub mod folds;
pub mod loss;
pub mod optim;
pub mod train;

pub use data::{bayes_classify, gen_covariance_dataset, sample_covariance_dataset, ClassCovariance, CovarianceClassSpec, Dataset, DatasetManifest, ManifestRow};
pub use folds::{stratified_kfold, Fold};
pub use optim::{sgd_step, CheckpointSelector, PlateauScheduler, SgdState};
pub use train::{evaluate, train, Evaluation, History, HistoryRow, TrainConfig, TrainOutcome};
