//! Central finite-difference checks of the analytic gradients.
//!
//! Relative error per coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelSpec};
use crate::error::Result;
use crate::heads::{self, HeadConfig, HeadVariant};
use crate::nn::layers::{self, BatchNormParams};
use crate::nn::{BackboneSpec, BnMode, Padding, ParamKind};
use crate::pipeline::loss::cross_entropy;
use crate::tensor::Tensor;

const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub h: f64,
    /// Minimum number of parameter coordinates to check.
    pub min_params: usize,
    /// Classifier ℓ2 strength included in the checked loss.
    pub lambda: f64,
    /// Negative control: scale every analytic gradient by `1.01`.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            min_params: 200,
            lambda: 0.01,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst error per layer kind.
    pub groups: IndexMap<String, f64>,
    pub checked: usize,
    /// Coordinates whose two one-sided differences disagree, i.e. the step
    /// crossed a ReLU kink; these are left out of the error.
    pub skipped_kinks: usize,
}

/// One-sided differences that disagree by more than this fraction mark a
/// non-differentiable point.
const KINK_TOLERANCE: f64 = 1e-2;
const KINK_FLOOR: f64 = 1e-13;

/// Picks evenly spaced coordinates from each tensor so that at least
/// `min_total` coordinates are chosen overall (or every coordinate, if fewer exist).
fn sample_coordinates(lens: &[usize], min_total: usize) -> Vec<Vec<usize>> {
    let total: usize = lens.iter().sum();
    let mut per = min_total.div_ceil(lens.len().max(1)).max(1);
    loop {
        let chosen: usize = lens.iter().map(|&l| l.min(per)).sum();
        if chosen >= min_total.min(total) {
            break;
        }
        per += 1;
    }
    lens.iter()
        .map(|&len| {
            let count = len.min(per);
            (0..count).map(|i| i * len / count).collect()
        })
        .collect()
}

/// Compares the model's analytic gradients of `cross-entropy + λ‖W_cls‖²`
/// (train-mode batch norm) with central differences.
pub fn grad_check(model: &Model<f64>, input: &Tensor<f64>, labels: &[usize], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let analytic = model.loss_and_grads(input, labels, opts.lambda, BnMode::Train)?.grads;
    let names: Vec<String> = analytic.keys().cloned().collect();
    let lens: Vec<usize> = analytic.values().map(|t| t.len()).collect();
    let coords = sample_coordinates(&lens, opts.min_params);

    let center = model.loss(input, labels, opts.lambda, BnMode::Train)?;
    let mut probe = model.clone();
    let mut skipped_kinks = 0;
    let mut groups: IndexMap<String, f64> = IndexMap::new();
    let mut max_rel_error = 0f64;
    let mut checked = 0;
    for (name, idxs) in names.iter().zip(coords) {
        let group = model.param_group(name);
        let worst = groups.entry(group).or_insert(0.0);
        for idx in idxs {
            let original = probe.params.get(name)?.data()[idx];
            probe.params.get_mut(name)?.data_mut()[idx] = original + opts.h;
            let plus = probe.loss(input, labels, opts.lambda, BnMode::Train)?;
            probe.params.get_mut(name)?.data_mut()[idx] = original - opts.h;
            let minus = probe.loss(input, labels, opts.lambda, BnMode::Train)?;
            probe.params.get_mut(name)?.data_mut()[idx] = original;
            let (up, down) = (plus - center, center - minus);
            if (up - down).abs() > KINK_TOLERANCE * up.abs().max(down.abs()) && (up - down).abs() > KINK_FLOOR {
                skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.h);
            let mut a = analytic[name].data()[idx];
            if opts.corrupt {
                a *= 1.01;
            }
            let err = relative_error(a, numeric);
            *worst = worst.max(err);
            max_rel_error = max_rel_error.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        groups,
        checked,
        skipped_kinks,
    })
}

/// The small backbone used for end-to-end checks: a 3×3 conv block and a
/// depthwise-separable block on a 6×6×3 input, giving a 3×3×8 map.
pub fn grad_check_backbone() -> BackboneSpec {
    BackboneSpec::micronet([6, 6, 3], &[4, 8], &[1, 2]).expect("valid backbone")
}

/// End-to-end check of every head variant on `backbone` with `samples`
/// random inputs. LiteFBCN uses `γ = 2`.
pub fn check_head_variants(
    backbone: &BackboneSpec,
    num_classes: usize,
    samples: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<IndexMap<HeadVariant, GradCheckReport>> {
    let [h, w, c] = backbone.input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = Tensor::from_fn(&[samples, h, w, c], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..samples).map(|i| i % num_classes).collect();
    let mut out = IndexMap::new();
    for variant in HeadVariant::ALL {
        let head = HeadConfig {
            gamma: if variant == HeadVariant::LiteFbcn { 2 } else { 1 },
            ..HeadConfig::new(variant, num_classes)
        };
        let mut model = Model::<f64>::build(ModelSpec::new(backbone.clone(), head), seed)?;
        // Perturb batch-norm affine terms and biases away from their
        // symmetric initial values so their gradients are exercised.
        for (name, p) in model.params.iter_mut() {
            if p.kind == ParamKind::Trainable && (name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".bias")) {
                for v in p.tensor.data_mut() {
                    *v += rng.random_range(-0.2..0.2);
                }
            }
        }
        out.insert(variant, grad_check(&model, &input, &labels, opts)?);
    }
    Ok(out)
}

/// Worst relative error of `analytic` against central differences of `f` at `x`.
fn fd_error(x: &Tensor<f64>, analytic: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let mut probe = x.clone();
    let mut worst = 0f64;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic.data()[i], (plus - minus) / (2.0 * h)));
    }
    worst
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks every layer kind in isolation against central differences with
/// step `h`, using `loss = Σ r ⊙ layer(x)` for a fixed random `r`. Returns
/// the worst relative error per kind (inputs and parameters together).
pub fn check_layer_kinds(seed: u64, h: f64) -> Result<IndexMap<String, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize], lo: f64, hi: f64| Tensor::<f64>::from_fn(shape, |_| rng.random_range(lo..hi));
    let mut report = IndexMap::new();

    // Standard 3×3 conv, stride 2, same padding, with bias.
    {
        let x = rand(&[2, 5, 5, 3], -1.0, 1.0);
        let w = rand(&[3, 3, 3, 4], -0.5, 0.5);
        let b = rand(&[4], -0.5, 0.5);
        let r = rand(&[2, 3, 3, 4], -1.0, 1.0);
        let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            dot(&r, &layers::conv2d_forward(x, w, Some(b), 2, Padding::Same).unwrap())
        };
        let g = layers::conv2d_backward(&x, &w, true, 2, Padding::Same, &r)?;
        let e = fd_error(&x, &g.input, h, |x| fwd(x, &w, &b))
            .max(fd_error(&w, &g.weights, h, |w| fwd(&x, w, &b)))
            .max(fd_error(&b, g.bias.as_ref().unwrap(), h, |b| fwd(&x, &w, b)));
        report.insert("Conv2D".to_string(), e);
    }
    // Depthwise 3×3, stride 1, same padding.
    {
        let x = rand(&[2, 4, 4, 3], -1.0, 1.0);
        let w = rand(&[3, 3, 3], -0.5, 0.5);
        let r = rand(&[2, 4, 4, 3], -1.0, 1.0);
        let fwd = |x: &Tensor<f64>, w: &Tensor<f64>| {
            dot(&r, &layers::depthwise_conv2d_forward(x, w, None, 1, Padding::Same).unwrap())
        };
        let g = layers::depthwise_conv2d_backward(&x, &w, false, 1, Padding::Same, &r)?;
        let e = fd_error(&x, &g.input, h, |x| fwd(x, &w)).max(fd_error(&w, &g.weights, h, |w| fwd(&x, w)));
        report.insert("DepthwiseConv2D".to_string(), e);
    }
    // Channel reducer (1×1 conv C→K with bias).
    {
        let x = rand(&[2, 3, 3, 4], -1.0, 1.0);
        let w = rand(&[1, 1, 4, 2], -0.5, 0.5);
        let b = rand(&[2], -0.5, 0.5);
        let r = rand(&[2, 3, 3, 2], -1.0, 1.0);
        let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            dot(&r, &heads::channel_reduce(x, w, Some(b)).unwrap())
        };
        let g = layers::conv2d_backward(&x, &w, true, 1, Padding::Same, &r)?;
        let e = fd_error(&x, &g.input, h, |x| fwd(x, &w, &b))
            .max(fd_error(&w, &g.weights, h, |w| fwd(&x, w, &b)))
            .max(fd_error(&b, g.bias.as_ref().unwrap(), h, |b| fwd(&x, &w, b)));
        report.insert("ChannelReducer".to_string(), e);
    }
    // Dense.
    {
        let x = rand(&[3, 5], -1.0, 1.0);
        let w = rand(&[5, 4], -0.5, 0.5);
        let b = rand(&[4], -0.5, 0.5);
        let r = rand(&[3, 4], -1.0, 1.0);
        let fwd = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| dot(&r, &layers::dense_forward(x, w, b).unwrap());
        let g = layers::dense_backward(&x, &w, &r)?;
        let e = fd_error(&x, &g.input, h, |x| fwd(x, &w, &b))
            .max(fd_error(&w, &g.weights, h, |w| fwd(&x, w, &b)))
            .max(fd_error(&b, &g.bias, h, |b| fwd(&x, &w, b)));
        report.insert("Dense".to_string(), e);
    }
    // Batch norm, train mode.
    {
        let x = rand(&[4, 2, 2, 3], -1.0, 1.0);
        let gamma = rand(&[3], 0.5, 1.5);
        let beta = rand(&[3], -0.5, 0.5);
        let (rm, rv) = (Tensor::zeros(&[3]), Tensor::full(&[3], 1.0));
        let r = rand(&[4, 2, 2, 3], -1.0, 1.0);
        let fwd = |x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>| {
            let p = BatchNormParams { gamma, beta, running_mean: &rm, running_var: &rv };
            dot(&r, &layers::batchnorm_forward(x, &p, BnMode::Train, 0.9, 1e-5).unwrap().output)
        };
        let p = BatchNormParams { gamma: &gamma, beta: &beta, running_mean: &rm, running_var: &rv };
        let out = layers::batchnorm_forward(&x, &p, BnMode::Train, 0.9, 1e-5)?;
        let g = layers::batchnorm_backward(&gamma, &out.cache, &r)?;
        let e = fd_error(&x, &g.input, h, |x| fwd(x, &gamma, &beta))
            .max(fd_error(&gamma, &g.gamma, h, |gm| fwd(&x, gm, &beta)))
            .max(fd_error(&beta, &g.beta, h, |bt| fwd(&x, &gamma, bt)));
        report.insert("BatchNorm".to_string(), e);
    }
    // ReLU, inputs kept away from the kink.
    {
        let x = rand(&[2, 3, 3, 2], 0.1, 1.0).map(|v| if (v * 1e4) as i64 % 2 == 0 { v } else { -v });
        let r = rand(&[2, 3, 3, 2], -1.0, 1.0);
        let g = layers::relu_backward(&x, &r);
        report.insert("ReLU".to_string(), fd_error(&x, &g, h, |x| dot(&r, &layers::relu_forward(x))));
    }
    // Global average pooling.
    {
        let x = rand(&[2, 3, 4, 3], -1.0, 1.0);
        let r = rand(&[2, 3], -1.0, 1.0);
        let g = layers::global_average_pool_backward(x.shape(), &r)?;
        report.insert(
            "GlobalAvgPool".to_string(),
            fd_error(&x, &g, h, |x| dot(&r, &layers::global_average_pool(x).unwrap())),
        );
    }
    // Self-bilinear pooling.
    {
        let x = rand(&[2, 3, 3, 3], -1.0, 1.0);
        let r = rand(&[2, 3, 3], -1.0, 1.0);
        let g = heads::bilinear_pool_self_backward(&x, &r)?;
        report.insert(
            "BilinearSelf".to_string(),
            fd_error(&x, &g, h, |x| dot(&r, &heads::bilinear_pool_self(x).unwrap())),
        );
    }
    // Dual-bilinear pooling.
    {
        let a = rand(&[2, 3, 3, 3], -1.0, 1.0);
        let b = rand(&[2, 3, 3, 2], -1.0, 1.0);
        let r = rand(&[2, 3, 2], -1.0, 1.0);
        let (ga, gb) = heads::bilinear_pool_dual_backward(&a, &b, &r)?;
        let e = fd_error(&a, &ga, h, |a| dot(&r, &heads::bilinear_pool_dual(a, &b).unwrap()))
            .max(fd_error(&b, &gb, h, |b| dot(&r, &heads::bilinear_pool_dual(&a, b).unwrap())));
        report.insert("BilinearDual".to_string(), e);
    }
    // Signed square root + ℓ2 normalization, entries kept away from zero.
    {
        let x = rand(&[2, 3, 3], 0.05, 2.0).map(|v| if (v * 1e4) as i64 % 3 == 0 { -v } else { v });
        let r = rand(&[2, 9], -1.0, 1.0);
        let g = heads::normalize_bilinear_backward(&x, &r)?;
        report.insert(
            "SignedSqrtL2".to_string(),
            fd_error(&x, &g, h, |x| dot(&r, &heads::normalize_bilinear(x).unwrap())),
        );
    }
    // Softmax + cross-entropy.
    {
        let logits = rand(&[4, 3], -2.0, 2.0);
        let labels = [0, 2, 1, 2];
        let loss = |l: &Tensor<f64>| cross_entropy(&heads::softmax(l).unwrap(), &labels).unwrap().0;
        let (_, g) = cross_entropy(&heads::softmax(&logits)?, &labels)?;
        report.insert("SoftmaxCrossEntropy".to_string(), fd_error(&logits, &g, h, loss));
    }
    // ℓ2 weight penalty λ‖W‖².
    {
        let w = rand(&[4, 3], -1.0, 1.0);
        let lambda = 0.01;
        let g = w.map(|v| 2.0 * lambda * v);
        report.insert(
            "L2Penalty".to_string(),
            fd_error(&w, &g, h, |w| lambda * w.data().iter().map(|v| v * v).sum::<f64>()),
        );
    }
    Ok(report)
}
