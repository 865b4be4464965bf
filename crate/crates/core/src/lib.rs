//! Compact self-bilinear classification heads on a small from-scratch CNN stack.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense channels-last tensors, elementary kernels and the
//!   `.rtf-tensor` on-disk format.
//! - [`nn`]: convolution / depthwise / dense / batch-norm layers with exact
//!   reverse-mode gradients, the micro backbone, parameter store and FLOP
//!   accounting.
//! - [`heads`]: channel reducer, self- and dual-bilinear pooling, the
//!   signed-sqrt / ℓ2 normalization chain and the closed-form head costs.
//! - [`model`]: a backbone and a head composed into one trainable network,
//!   plus finite-difference gradient checking.
//! - [`pipeline`]: synthetic covariance-texture data, stratified k-fold
//!   splits, SGD with Nesterov momentum, plateau schedule and the training loop.
//! - [`analysis`]: confusion matrices, metrics, repeated-measures ANOVA,
//!   feature export and the efficiency report.

pub mod analysis;
pub mod error;
pub mod heads;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use heads::{HeadConfig, HeadVariant};
pub use model::{Model, ModelSpec};
pub use nn::{BackboneSpec, LayerKind, LayerSpec, Padding, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
