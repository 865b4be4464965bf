//! A backbone (or two, for the dual-branch head) composed with a
//! classification head into one trainable network.

mod gradcheck;

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{self, head_param_count, resolve_reduction, HeadConfig, HeadParamCount, HeadVariant};
use crate::nn::layers::{self, BatchNormParams, BnCache};
use crate::nn::{flops, kaiming_uniform, BackboneSpec, BnMode, LayerKind, ParamEntry, ParamKind, ParamStore};
use crate::nn::{BN_EPS, BN_MOMENTUM};
use crate::pipeline::loss::cross_entropy;
use crate::tensor::{Scalar, Tensor};

pub use gradcheck::{check_head_variants, check_layer_kinds, grad_check, grad_check_backbone, GradCheckOptions, GradCheckReport};

pub const CLASSIFIER_WEIGHT: &str = "head.classifier.weight";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub backbone: BackboneSpec,
    /// Second branch of the dual-backbone head; defaults to a copy of `backbone`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub second_backbone: Option<BackboneSpec>,
    pub head: HeadConfig,
}

impl ModelSpec {
    pub fn new(backbone: BackboneSpec, head: HeadConfig) -> Self {
        ModelSpec {
            backbone,
            second_backbone: None,
            head,
        }
    }

    /// The second branch, if the head uses one.
    pub fn branch_b(&self) -> Option<&BackboneSpec> {
        (self.head.variant == HeadVariant::BcnnDual).then(|| self.second_backbone.as_ref().unwrap_or(&self.backbone))
    }

    /// Backbone output `(H, W, C)` for each branch, after validating the whole spec.
    pub fn feature_shapes(&self) -> Result<([usize; 3], Option<[usize; 3]>)> {
        let a = self.backbone.output_shape()?;
        let b = match self.branch_b() {
            Some(spec) => {
                if spec.input != self.backbone.input {
                    return Err(Error::Config(format!(
                        "both backbones must take the same input, got {:?} and {:?}",
                        self.backbone.input, spec.input
                    )));
                }
                let b = spec.output_shape()?;
                if (a[0], a[1]) != (b[0], b[1]) {
                    return Err(Error::SpatialMismatch { a: (a[0], a[1]), b: (b[0], b[1]) });
                }
                Some(b)
            }
            None => None,
        };
        self.head.validate(a[2])?;
        Ok((a, b))
    }

    /// Length of the vector the classifier sees.
    pub fn feature_len(&self) -> Result<usize> {
        let (a, b) = self.feature_shapes()?;
        self.head.feature_len(a[2], b.map_or(0, |s| s[2]))
    }

    pub fn head_param_count(&self) -> Result<HeadParamCount> {
        let (a, b) = self.feature_shapes()?;
        head_param_count(&self.head, a[2], b.map_or(0, |s| s[2]))
    }
}

/// Per-layer parameter counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerParamCount {
    pub layer: String,
    pub trainable: usize,
    pub running: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub layers: Vec<LayerParamCount>,
    pub trainable: usize,
    pub running: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.trainable + self.running
    }

    /// Sum over layers whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> (usize, usize) {
        self.layers
            .iter()
            .filter(|l| l.layer.starts_with(prefix))
            .fold((0, 0), |(t, r), l| (t + l.trainable, r + l.running))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerFlops {
    pub layer: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub layers: Vec<LayerFlops>,
}

impl FlopReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.flops).sum()
    }

    pub fn head(&self) -> u64 {
        self.layers.iter().filter(|l| l.layer.starts_with("head")).map(|l| l.flops).sum()
    }

    pub fn backbone(&self) -> u64 {
        self.total() - self.head()
    }
}

/// Closed-form inference FLOPs for one image.
pub fn estimate_flops(spec: &ModelSpec) -> Result<FlopReport> {
    let (fa, fb) = spec.feature_shapes()?;
    let mut layers = Vec::new();
    let branches: Vec<(&str, &BackboneSpec)> = std::iter::once(("backbone", &spec.backbone))
        .chain(spec.branch_b().map(|b| ("backbone_b", b)))
        .collect();
    for (prefix, bb) in branches {
        let trace = bb.shape_trace()?;
        for (i, layer) in bb.layers.iter().enumerate() {
            let [h, w, c] = trace[i];
            let [oh, ow, oc] = trace[i + 1];
            let f = match layer.kind {
                LayerKind::Conv2d => flops::conv(oh, ow, layer.kernel, c, oc, layer.has_bias),
                LayerKind::DepthwiseConv2d => flops::depthwise(oh, ow, layer.kernel, c, layer.has_bias),
                LayerKind::BatchNorm => flops::batchnorm(h * w * c),
                LayerKind::Relu => 0,
                LayerKind::Dense | LayerKind::GlobalAvgPool => unreachable!("rejected by output_shape"),
            };
            layers.push(LayerFlops {
                layer: format!("{prefix}.{i}.{}", layer.kind.name()),
                flops: f,
            });
        }
    }
    let [h, w, c] = fa;
    let head = &spec.head;
    let n = head.num_classes;
    let mut push = |name: &str, f: u64| {
        layers.push(LayerFlops {
            layer: format!("head.{name}"),
            flops: f,
        })
    };
    let len = match head.variant {
        HeadVariant::BaselineGap => {
            push("gap", flops::global_average_pool(h, w, c));
            c
        }
        HeadVariant::FastBcnn => {
            push("bilinear", flops::self_bilinear(h, w, c));
            c * c
        }
        HeadVariant::LiteFbcn => {
            let k = resolve_reduction(c, head.gamma)?;
            push("reducer", flops::conv(h, w, [1, 1], c, k, head.reducer_bias));
            push("bilinear", flops::self_bilinear(h, w, k));
            k * k
        }
        HeadVariant::BcnnDual => {
            let cb = fb.expect("dual head has a second branch")[2];
            push("bilinear", flops::dual_bilinear(h, w, c, cb));
            c * cb
        }
    };
    if head.variant.is_bilinear() {
        push("normalize", flops::normalize(len));
        push("bn", flops::batchnorm(len));
    }
    push("classifier", flops::dense(len, n));
    push("softmax", flops::softmax(n));
    Ok(FlopReport { layers })
}

/// Layer records kept by a recorded forward pass.
#[derive(Debug, Clone)]
struct BranchTape<T> {
    inputs: Vec<Tensor<T>>,
    bn: Vec<Option<BnCache<T>>>,
}

#[derive(Debug, Clone)]
struct Tape<T> {
    input_shape: Vec<usize>,
    branch_a: BranchTape<T>,
    branch_b: Option<BranchTape<T>>,
    map_a: Tensor<T>,
    map_b: Option<Tensor<T>>,
    reduced: Option<Tensor<T>>,
    pooled: Tensor<T>,
    bn: Option<BnCache<T>>,
    classifier_input: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    /// Pooled vector before the head's batch norm: the normalized bilinear
    /// vector, or the GAP vector for the baseline head. `(N, L)`.
    pub features: Tensor<T>,
    /// New running statistics produced in train mode, by parameter name.
    pub running_updates: Vec<(String, Tensor<T>)>,
    tape: Option<Tape<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn is_recorded(&self) -> bool {
        self.tape.is_some()
    }

    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.probs)
    }
}

pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let m = t.shape()[1];
    t.data()
        .chunks_exact(m)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect()
}

pub type Gradients<T> = IndexMap<String, Tensor<T>>;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean cross-entropy plus the classifier ℓ2 penalty.
    pub loss: f64,
    pub cross_entropy: f64,
    pub grads: Gradients<T>,
    pub forward: Forward<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub params: ParamStore<T>,
}

/// On-disk checkpoint manifest (`model.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub spec: ModelSpec,
    pub params: Vec<ParamEntry>,
}

pub const MODEL_MANIFEST: &str = "model.json";

/// Builds a model from a backbone and head with seeded initialization.
pub fn build_micronet<T: Scalar>(backbone: BackboneSpec, head: HeadConfig, seed: u64) -> Result<Model<T>> {
    Model::build(ModelSpec::new(backbone, head), seed)
}

impl<T: Scalar> Model<T> {
    /// Kaiming-uniform (fan-in) for conv/dense weights, zero biases, batch
    /// norm `γ=1, β=0, mean=0, var=1`.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let (fa, fb) = spec.feature_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let add_bn = |params: &mut ParamStore<T>, prefix: &str, f: usize| -> Result<()> {
            params.insert(format!("{prefix}.gamma"), Tensor::full(&[f], T::one()), ParamKind::Trainable)?;
            params.insert(format!("{prefix}.beta"), Tensor::zeros(&[f]), ParamKind::Trainable)?;
            params.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[f]), ParamKind::Running)?;
            params.insert(format!("{prefix}.running_var"), Tensor::full(&[f], T::one()), ParamKind::Running)?;
            Ok(())
        };
        let branches: Vec<(&str, &BackboneSpec)> = std::iter::once(("backbone", &spec.backbone))
            .chain(spec.branch_b().map(|b| ("backbone_b", b)))
            .collect();
        for (prefix, bb) in branches {
            let trace = bb.shape_trace()?;
            for (i, layer) in bb.layers.iter().enumerate() {
                let c = trace[i][2];
                let p = format!("{prefix}.{i}");
                let [kh, kw] = layer.kernel;
                match layer.kind {
                    LayerKind::Conv2d => {
                        let w = kaiming_uniform(&[kh, kw, c, layer.channels], kh * kw * c, &mut rng);
                        params.insert(format!("{p}.weight"), w, ParamKind::Trainable)?;
                        if layer.has_bias {
                            params.insert(format!("{p}.bias"), Tensor::zeros(&[layer.channels]), ParamKind::Trainable)?;
                        }
                    }
                    LayerKind::DepthwiseConv2d => {
                        let w = kaiming_uniform(&[kh, kw, c], kh * kw, &mut rng);
                        params.insert(format!("{p}.weight"), w, ParamKind::Trainable)?;
                        if layer.has_bias {
                            params.insert(format!("{p}.bias"), Tensor::zeros(&[c]), ParamKind::Trainable)?;
                        }
                    }
                    LayerKind::BatchNorm => add_bn(&mut params, &p, c)?,
                    LayerKind::Relu => {}
                    LayerKind::Dense | LayerKind::GlobalAvgPool => unreachable!("rejected by output_shape"),
                }
            }
        }
        let c = fa[2];
        let head = &spec.head;
        let len = head.feature_len(c, fb.map_or(0, |s| s[2]))?;
        if head.variant == HeadVariant::LiteFbcn {
            let k = resolve_reduction(c, head.gamma)?;
            let w = kaiming_uniform(&[1, 1, c, k], c, &mut rng);
            params.insert("head.reducer.weight", w, ParamKind::Trainable)?;
            if head.reducer_bias {
                params.insert("head.reducer.bias", Tensor::zeros(&[k]), ParamKind::Trainable)?;
            }
        }
        if head.variant.is_bilinear() {
            add_bn(&mut params, "head.bn", len)?;
        }
        let w = kaiming_uniform(&[len, head.num_classes], len, &mut rng);
        params.insert(CLASSIFIER_WEIGHT, w, ParamKind::Trainable)?;
        params.insert("head.classifier.bias", Tensor::zeros(&[head.num_classes]), ParamKind::Trainable)?;
        Ok(Model { spec, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    pub fn count_params(&self) -> ParamCount {
        let mut layers: Vec<LayerParamCount> = Vec::new();
        for (name, p) in self.params.iter() {
            let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
            if layers.last().is_none_or(|l| l.layer != layer) {
                layers.push(LayerParamCount {
                    layer: layer.to_string(),
                    trainable: 0,
                    running: 0,
                });
            }
            let entry = layers.last_mut().unwrap();
            match p.kind {
                ParamKind::Trainable => entry.trainable += p.tensor.len(),
                ParamKind::Running => entry.running += p.tensor.len(),
            }
        }
        let (trainable, running) = self.params.scalar_counts();
        ParamCount {
            layers,
            trainable,
            running,
        }
    }

    /// Layer-kind label of a parameter, used to group gradient-check results.
    pub fn param_group(&self, name: &str) -> String {
        let mut parts = name.split('.');
        match (parts.next(), parts.next()) {
            (Some(prefix @ ("backbone" | "backbone_b")), Some(idx)) => {
                let spec = if prefix == "backbone" {
                    &self.spec.backbone
                } else {
                    self.spec.branch_b().unwrap_or(&self.spec.backbone)
                };
                let i: usize = idx.parse().unwrap_or(usize::MAX);
                match spec.layers.get(i) {
                    Some(l) if l.kind == LayerKind::Conv2d && l.kernel == [1, 1] => "Conv2D(1x1)".into(),
                    Some(l) => l.kind.name().into(),
                    None => name.into(),
                }
            }
            (Some("head"), Some("reducer")) => "ChannelReducer".into(),
            (Some("head"), Some("bn")) => "BatchNorm(head)".into(),
            (Some("head"), Some("classifier")) => "Dense(classifier)".into(),
            _ => name.into(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let s = input.shape();
        if s.len() != 4 || s[1..] != self.spec.backbone.input {
            return Err(Error::VariantShapeMismatch {
                variant: self.spec.head.variant.name(),
                expected: format!("(N, {:?})", self.spec.backbone.input),
                got: format!("{s:?}"),
            });
        }
        Ok(())
    }

    fn bn_params(&self, prefix: &str) -> Result<BatchNormParams<'_, T>> {
        Ok(BatchNormParams {
            gamma: self.params.get(&format!("{prefix}.gamma"))?,
            beta: self.params.get(&format!("{prefix}.beta"))?,
            running_mean: self.params.get(&format!("{prefix}.running_mean"))?,
            running_var: self.params.get(&format!("{prefix}.running_var"))?,
        })
    }

    fn branch_forward(
        &self,
        prefix: &str,
        spec: &BackboneSpec,
        input: &Tensor<T>,
        mode: BnMode,
        record: bool,
        updates: &mut Vec<(String, Tensor<T>)>,
    ) -> Result<(Tensor<T>, Option<BranchTape<T>>)> {
        let mut tape = record.then(|| BranchTape {
            inputs: Vec::with_capacity(spec.layers.len()),
            bn: Vec::with_capacity(spec.layers.len()),
        });
        let mut x = input.clone();
        for (i, layer) in spec.layers.iter().enumerate() {
            let p = format!("{prefix}.{i}");
            let bias = || self.params.get(&format!("{p}.bias")).ok();
            let mut bn_cache = None;
            let y = match layer.kind {
                LayerKind::Conv2d => layers::conv2d_forward(
                    &x,
                    self.params.get(&format!("{p}.weight"))?,
                    if layer.has_bias { bias() } else { None },
                    layer.stride,
                    layer.padding,
                )?,
                LayerKind::DepthwiseConv2d => layers::depthwise_conv2d_forward(
                    &x,
                    self.params.get(&format!("{p}.weight"))?,
                    if layer.has_bias { bias() } else { None },
                    layer.stride,
                    layer.padding,
                )?,
                LayerKind::BatchNorm => {
                    let out = layers::batchnorm_forward(&x, &self.bn_params(&p)?, mode, BN_MOMENTUM, BN_EPS)?;
                    if let Some((rm, rv)) = out.running {
                        updates.push((format!("{p}.running_mean"), rm));
                        updates.push((format!("{p}.running_var"), rv));
                    }
                    bn_cache = Some(out.cache);
                    out.output
                }
                LayerKind::Relu => layers::relu_forward(&x),
                LayerKind::Dense | LayerKind::GlobalAvgPool => unreachable!("rejected by output_shape"),
            };
            if let Some(t) = tape.as_mut() {
                t.inputs.push(std::mem::replace(&mut x, y));
                t.bn.push(bn_cache);
            } else {
                x = y;
            }
        }
        Ok((x, tape))
    }

    /// Full forward pass on a batch `(N, H, W, C_in)`. With `record` the
    /// intermediate values needed by [`Model::backward`] are kept.
    pub fn forward(&self, input: &Tensor<T>, mode: BnMode, record: bool) -> Result<Forward<T>> {
        self.check_input(input)?;
        let mut updates = Vec::new();
        let (map_a, tape_a) = self.branch_forward("backbone", &self.spec.backbone, input, mode, record, &mut updates)?;
        let (map_b, tape_b) = match self.spec.branch_b() {
            Some(spec) => {
                let (m, t) = self.branch_forward("backbone_b", spec, input, mode, record, &mut updates)?;
                (Some(m), t)
            }
            None => (None, None),
        };
        self.head_forward(input.shape().to_vec(), map_a, map_b, tape_a, tape_b, mode, record, updates)
    }

    #[allow(clippy::too_many_arguments)]
    fn head_forward(
        &self,
        input_shape: Vec<usize>,
        map_a: Tensor<T>,
        map_b: Option<Tensor<T>>,
        tape_a: Option<BranchTape<T>>,
        tape_b: Option<BranchTape<T>>,
        mode: BnMode,
        record: bool,
        mut updates: Vec<(String, Tensor<T>)>,
    ) -> Result<Forward<T>> {
        let variant = self.spec.head.variant;
        let n = map_a.shape()[0];
        let mut reduced = None;
        let mut bn = None;
        let (pooled, features, classifier_input) = if variant == HeadVariant::BaselineGap {
            let pooled = layers::global_average_pool(&map_a)?;
            (pooled.clone(), pooled.clone(), pooled)
        } else {
            let pooled = match variant {
                HeadVariant::FastBcnn => heads::bilinear_pool_self(&map_a)?,
                HeadVariant::LiteFbcn => {
                    let r = heads::channel_reduce(
                        &map_a,
                        self.params.get("head.reducer.weight")?,
                        self.params.get("head.reducer.bias").ok(),
                    )?;
                    let pooled = heads::bilinear_pool_self(&r)?;
                    reduced = Some(r);
                    pooled
                }
                HeadVariant::BcnnDual => {
                    let b = map_b.as_ref().ok_or_else(|| Error::VariantShapeMismatch {
                        variant: variant.name(),
                        expected: "two feature maps".into(),
                        got: "one".into(),
                    })?;
                    heads::bilinear_pool_dual(&map_a, b)?
                }
                HeadVariant::BaselineGap => unreachable!(),
            };
            let normalized = heads::normalize_bilinear(&pooled)?;
            let out = layers::batchnorm_forward(&normalized, &self.bn_params("head.bn")?, mode, BN_MOMENTUM, BN_EPS)?;
            if let Some((rm, rv)) = out.running {
                updates.push(("head.bn.running_mean".into(), rm));
                updates.push(("head.bn.running_var".into(), rv));
            }
            bn = Some(out.cache);
            (pooled, normalized, out.output)
        };
        let logits = layers::dense_forward(
            &classifier_input,
            self.params.get(CLASSIFIER_WEIGHT)?,
            self.params.get("head.classifier.bias")?,
        )?;
        let probs = heads::softmax(&logits)?;
        debug_assert_eq!(probs.shape()[0], n);
        let tape = match (record, tape_a) {
            (true, Some(branch_a)) => Some(Tape {
                input_shape,
                branch_a,
                branch_b: tape_b,
                map_a,
                map_b,
                reduced,
                pooled,
                bn,
                classifier_input,
            }),
            _ => None,
        };
        Ok(Forward {
            logits,
            probs,
            features,
            running_updates: updates,
            tape,
        })
    }

    fn branch_backward(
        &self,
        prefix: &str,
        spec: &BackboneSpec,
        tape: &BranchTape<T>,
        mut grad: Tensor<T>,
        out: &mut HashMap<String, Tensor<T>>,
    ) -> Result<Tensor<T>> {
        for (i, layer) in spec.layers.iter().enumerate().rev() {
            let p = format!("{prefix}.{i}");
            let x = &tape.inputs[i];
            grad = match layer.kind {
                LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                    let w = self.params.get(&format!("{p}.weight"))?;
                    let g = if layer.kind == LayerKind::Conv2d {
                        layers::conv2d_backward(x, w, layer.has_bias, layer.stride, layer.padding, &grad)?
                    } else {
                        layers::depthwise_conv2d_backward(x, w, layer.has_bias, layer.stride, layer.padding, &grad)?
                    };
                    out.insert(format!("{p}.weight"), g.weights);
                    if let Some(b) = g.bias {
                        out.insert(format!("{p}.bias"), b);
                    }
                    g.input
                }
                LayerKind::BatchNorm => {
                    let cache = tape.bn[i].as_ref().ok_or(Error::UnrecordedForward)?;
                    let g = layers::batchnorm_backward(self.params.get(&format!("{p}.gamma"))?, cache, &grad)?;
                    out.insert(format!("{p}.gamma"), g.gamma);
                    out.insert(format!("{p}.beta"), g.beta);
                    g.input
                }
                LayerKind::Relu => layers::relu_backward(x, &grad),
                LayerKind::Dense | LayerKind::GlobalAvgPool => unreachable!("rejected by output_shape"),
            };
        }
        Ok(grad)
    }

    /// Reverse-mode gradients of every trainable parameter given the
    /// gradient of the loss with respect to the logits.
    pub fn backward(&self, forward: &Forward<T>, grad_logits: &Tensor<T>) -> Result<Gradients<T>> {
        self.backward_with_input(forward, grad_logits).map(|(g, _)| g)
    }

    /// Like [`Model::backward`], also returning the gradient with respect to
    /// the network input.
    pub fn backward_with_input(&self, forward: &Forward<T>, grad_logits: &Tensor<T>) -> Result<(Gradients<T>, Tensor<T>)> {
        let tape = forward.tape.as_ref().ok_or(Error::UnrecordedForward)?;
        if grad_logits.shape() != forward.logits.shape() {
            return Err(Error::shape(
                "backward",
                format!("logit gradient {:?} vs logits {:?}", grad_logits.shape(), forward.logits.shape()),
            ));
        }
        let mut out = HashMap::new();
        let d = layers::dense_backward(&tape.classifier_input, self.params.get(CLASSIFIER_WEIGHT)?, grad_logits)?;
        out.insert(CLASSIFIER_WEIGHT.to_string(), d.weights);
        out.insert("head.classifier.bias".to_string(), d.bias);
        let variant = self.spec.head.variant;
        let (grad_a, grad_b) = if variant == HeadVariant::BaselineGap {
            (layers::global_average_pool_backward(tape.map_a.shape(), &d.input)?, None)
        } else {
            let cache = tape.bn.as_ref().ok_or(Error::UnrecordedForward)?;
            let g = layers::batchnorm_backward(self.params.get("head.bn.gamma")?, cache, &d.input)?;
            out.insert("head.bn.gamma".into(), g.gamma);
            out.insert("head.bn.beta".into(), g.beta);
            let dpooled = heads::normalize_bilinear_backward(&tape.pooled, &g.input)?;
            match variant {
                HeadVariant::FastBcnn => (heads::bilinear_pool_self_backward(&tape.map_a, &dpooled)?, None),
                HeadVariant::LiteFbcn => {
                    let reduced = tape.reduced.as_ref().ok_or(Error::UnrecordedForward)?;
                    let dreduced = heads::bilinear_pool_self_backward(reduced, &dpooled)?;
                    let w = self.params.get("head.reducer.weight")?;
                    let has_bias = self.params.contains("head.reducer.bias");
                    let g = layers::conv2d_backward(&tape.map_a, w, has_bias, 1, crate::nn::Padding::Same, &dreduced)?;
                    out.insert("head.reducer.weight".into(), g.weights);
                    if let Some(b) = g.bias {
                        out.insert("head.reducer.bias".into(), b);
                    }
                    (g.input, None)
                }
                HeadVariant::BcnnDual => {
                    let mb = tape.map_b.as_ref().ok_or(Error::UnrecordedForward)?;
                    let (ga, gb) = heads::bilinear_pool_dual_backward(&tape.map_a, mb, &dpooled)?;
                    (ga, Some(gb))
                }
                HeadVariant::BaselineGap => unreachable!(),
            }
        };
        let mut grad_input = self.branch_backward("backbone", &self.spec.backbone, &tape.branch_a, grad_a, &mut out)?;
        if let (Some(spec), Some(tb), Some(gb)) = (self.spec.branch_b(), tape.branch_b.as_ref(), grad_b) {
            let gi = self.branch_backward("backbone_b", spec, tb, gb, &mut out)?;
            for (a, b) in grad_input.data_mut().iter_mut().zip(gi.data()) {
                *a += *b;
            }
        }
        debug_assert_eq!(grad_input.shape(), tape.input_shape.as_slice());
        let mut grads = IndexMap::new();
        for (name, t) in self.params.trainable() {
            let g = out.remove(name).unwrap_or_else(|| Tensor::zeros(t.shape()));
            grads.insert(name.to_string(), g);
        }
        Ok((grads, grad_input))
    }

    /// `λ·‖W_cls‖²`.
    pub fn classifier_penalty(&self, lambda: f64) -> Result<f64> {
        let w = self.params.get(CLASSIFIER_WEIGHT)?;
        Ok(lambda * w.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
    }

    /// Mean cross-entropy plus `λ‖W_cls‖²` on a labelled batch, and the
    /// gradients of that loss. The forward pass runs in `mode`.
    pub fn loss_and_grads(&self, input: &Tensor<T>, labels: &[usize], lambda: f64, mode: BnMode) -> Result<LossOutput<T>> {
        let forward = self.forward(input, mode, true)?;
        let (ce, grad_logits) = cross_entropy(&forward.probs, labels)?;
        let mut grads = self.backward(&forward, &grad_logits)?;
        let w = self.params.get(CLASSIFIER_WEIGHT)?;
        let two_lambda = T::from_f64(2.0 * lambda);
        if let Some(g) = grads.get_mut(CLASSIFIER_WEIGHT) {
            for (gv, &wv) in g.data_mut().iter_mut().zip(w.data()) {
                *gv += two_lambda * wv;
            }
        }
        Ok(LossOutput {
            loss: ce + self.classifier_penalty(lambda)?,
            cross_entropy: ce,
            grads,
            forward,
        })
    }

    /// Loss value only (no tape); used by finite differences.
    pub fn loss(&self, input: &Tensor<T>, labels: &[usize], lambda: f64, mode: BnMode) -> Result<f64> {
        let forward = self.forward(input, mode, false)?;
        let (ce, _) = cross_entropy(&forward.probs, labels)?;
        Ok(ce + self.classifier_penalty(lambda)?)
    }

    pub fn apply_running_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, t) in updates {
            self.params.set(&name, t)?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let entries = self.params.save(dir)?;
        let manifest = CheckpointManifest {
            spec: self.spec.clone(),
            params: entries,
        };
        let path = dir.join(MODEL_MANIFEST);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        manifest.spec.feature_shapes()?;
        let params = ParamStore::load(dir, &manifest.params)?;
        let expected = Model::<T>::build(manifest.spec.clone(), 0)?;
        let names = |s: &ParamStore<T>| s.iter().map(|(n, p)| (n.to_string(), p.tensor.shape().to_vec())).collect::<Vec<_>>();
        if names(&params) != names(&expected.params) {
            return Err(Error::Config(format!(
                "checkpoint parameters in {} do not match its model spec",
                dir.display()
            )));
        }
        Ok(Model {
            spec: manifest.spec,
            params,
        })
    }
}
