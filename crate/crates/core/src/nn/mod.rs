//! Layers, the micro backbone description, and the parameter store.

pub mod flops;
pub mod layers;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layers::{conv_out_dim, BnMode};
pub use params::{kaiming_uniform, Param, ParamEntry, ParamKind, ParamStore};

/// Batch-norm constants used throughout the stack.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    #[serde(rename = "Conv2D")]
    Conv2d,
    #[serde(rename = "DepthwiseConv2D")]
    DepthwiseConv2d,
    Dense,
    BatchNorm,
    #[serde(rename = "ReLU")]
    Relu,
    GlobalAvgPool,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "Conv2D",
            LayerKind::DepthwiseConv2d => "DepthwiseConv2D",
            LayerKind::Dense => "Dense",
            LayerKind::BatchNorm => "BatchNorm",
            LayerKind::Relu => "ReLU",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// One layer of a sequential network. `channels` is the output channel
/// count (for shape-preserving layers it must equal the input's).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: [usize; 2],
    pub stride: usize,
    pub padding: Padding,
    pub channels: usize,
    pub has_bias: bool,
}

impl LayerSpec {
    pub fn conv(kernel: usize, stride: usize, channels: usize, has_bias: bool) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            kernel: [kernel, kernel],
            stride,
            padding: Padding::Same,
            channels,
            has_bias,
        }
    }

    pub fn depthwise(kernel: usize, stride: usize, channels: usize) -> Self {
        LayerSpec {
            kind: LayerKind::DepthwiseConv2d,
            kernel: [kernel, kernel],
            stride,
            padding: Padding::Same,
            channels,
            has_bias: false,
        }
    }

    fn elementwise(kind: LayerKind, channels: usize) -> Self {
        LayerSpec {
            kind,
            kernel: [1, 1],
            stride: 1,
            padding: Padding::Same,
            channels,
            has_bias: false,
        }
    }

    pub fn batch_norm(channels: usize) -> Self {
        Self::elementwise(LayerKind::BatchNorm, channels)
    }

    pub fn relu(channels: usize) -> Self {
        Self::elementwise(LayerKind::Relu, channels)
    }

    /// Output `(H, W, C)` for an input `(H, W, C)`.
    pub fn output_shape(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let [h, w, c] = input;
        let bad = |detail: String| Error::Config(format!("{} layer: {detail}", self.kind.name()));
        match self.kind {
            LayerKind::Conv2d | LayerKind::DepthwiseConv2d => {
                if self.channels == 0 {
                    return Err(bad("channel count must be positive".into()));
                }
                if self.kind == LayerKind::DepthwiseConv2d && self.channels != c {
                    return Err(bad(format!("depthwise must preserve channels ({c} → {})", self.channels)));
                }
                let (oh, _) = conv_out_dim(h, self.kernel[0], self.stride, self.padding)
                    .ok_or_else(|| bad(format!("kernel does not fit {h}×{w}")))?;
                let (ow, _) = conv_out_dim(w, self.kernel[1], self.stride, self.padding)
                    .ok_or_else(|| bad(format!("kernel does not fit {h}×{w}")))?;
                Ok([oh, ow, self.channels])
            }
            LayerKind::BatchNorm | LayerKind::Relu => {
                if self.channels != c {
                    return Err(bad(format!("expects {} channels, input has {c}", self.channels)));
                }
                Ok(input)
            }
            LayerKind::GlobalAvgPool => Ok([1, 1, c]),
            LayerKind::Dense => Ok([1, 1, self.channels]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// 3×3 convolution → batch norm → ReLU.
    Conv,
    /// Depthwise 3×3 → BN → ReLU → pointwise 1×1 → BN → ReLU.
    Separable,
}

/// Feature extractor: an input shape and a sequence of layers producing the
/// `(H, W, C)` map that the head consumes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl BackboneSpec {
    /// No layers: the input is passed through unchanged.
    pub fn identity(input: [usize; 3]) -> Self {
        BackboneSpec { input, layers: Vec::new() }
    }

    /// Alternating standard-conv and depthwise-separable blocks, starting with
    /// a standard conv. Convolutions carry no bias since batch norm follows.
    pub fn micronet(input: [usize; 3], widths: &[usize], strides: &[usize]) -> Result<Self> {
        if widths.len() != strides.len() {
            return Err(Error::Config(format!(
                "{} widths but {} strides",
                widths.len(),
                strides.len()
            )));
        }
        let kinds = (0..widths.len()).map(|i| if i % 2 == 0 { BlockKind::Conv } else { BlockKind::Separable });
        let blocks: Vec<_> = kinds.zip(widths.iter().zip(strides)).map(|(k, (&w, &s))| (k, w, s)).collect();
        Self::from_blocks(input, &blocks)
    }

    pub fn from_blocks(input: [usize; 3], blocks: &[(BlockKind, usize, usize)]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut c = input[2];
        for &(kind, width, stride) in blocks {
            match kind {
                BlockKind::Conv => {
                    layers.push(LayerSpec::conv(3, stride, width, false));
                }
                BlockKind::Separable => {
                    layers.push(LayerSpec::depthwise(3, stride, c));
                    layers.push(LayerSpec::batch_norm(c));
                    layers.push(LayerSpec::relu(c));
                    layers.push(LayerSpec::conv(1, 1, width, false));
                }
            }
            layers.push(LayerSpec::batch_norm(width));
            layers.push(LayerSpec::relu(width));
            c = width;
        }
        let spec = BackboneSpec { input, layers };
        spec.output_shape()?;
        Ok(spec)
    }

    /// The desk-scale default: 32×32×1 input, widths 8/16/32/64, strides 1/2/2/2.
    pub fn desk_default() -> Self {
        Self::micronet([32, 32, 1], &[8, 16, 32, 64], &[1, 2, 2, 2]).expect("default backbone is valid")
    }

    /// Traces shapes through every layer; fails on any inconsistency.
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        if self.input.contains(&0) {
            return Err(Error::Config(format!("backbone input {:?} has a zero dimension", self.input)));
        }
        let mut shape = self.input;
        for layer in &self.layers {
            if matches!(layer.kind, LayerKind::Dense | LayerKind::GlobalAvgPool) {
                return Err(Error::Config(format!(
                    "{} is a head layer and cannot appear in a backbone",
                    layer.kind.name()
                )));
            }
            shape = layer.output_shape(shape)?;
        }
        Ok(shape)
    }

    /// Input shape of every layer, followed by the final output shape.
    pub fn shape_trace(&self) -> Result<Vec<[usize; 3]>> {
        let mut out = vec![self.input];
        let mut shape = self.input;
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            out.push(shape);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_ends_at_4x4x64() {
        assert_eq!(BackboneSpec::desk_default().output_shape().unwrap(), [4, 4, 64]);
    }

    #[test]
    fn identity_backbone_passes_shape() {
        assert_eq!(BackboneSpec::identity([8, 8, 4]).output_shape().unwrap(), [8, 8, 4]);
    }

    #[test]
    fn depthwise_must_preserve_channels() {
        let spec = BackboneSpec {
            input: [8, 8, 3],
            layers: vec![LayerSpec::depthwise(3, 1, 4)],
        };
        assert!(spec.output_shape().is_err());
    }

    #[test]
    fn json_uses_stable_field_names() {
        let json = serde_json::to_value(LayerSpec::conv(3, 2, 16, false)).unwrap();
        let obj = json.as_object().unwrap();
        let mut keys: Vec<_> = obj.keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["channels", "has_bias", "kernel", "kind", "padding", "stride"]);
        assert_eq!(obj["kind"], "Conv2D");
        assert_eq!(obj["padding"], "same");
        let spec = BackboneSpec::desk_default();
        let back: BackboneSpec = serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<LayerSpec>(
            r#"{"kind":"ReLU","kernel":[1,1],"stride":1,"padding":"same","channels":3,"has_bias":false,"extra":1}"#
        )
        .is_err());
    }
}
