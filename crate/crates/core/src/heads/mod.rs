//! Classification heads on top of a backbone feature map `F ∈ R^{H×W×C}`.
//!
//! | variant | pipeline |
//! |---|---|
//! | `BaselineGAP` | GAP → dense → softmax |
//! | `FastBCNN` | self-bilinear(F) → ssqrt/ℓ2 → BN → dense → softmax |
//! | `LiteFBCN` | 1×1 reducer C→K → self-bilinear → ssqrt/ℓ2 → BN → dense → softmax |
//! | `BCNNDual` | bilinear(F_A, F_B) → ssqrt/ℓ2 → BN → dense → softmax |
//!
//! With `K = C / γ` the LiteFBCN bilinear vector has `K² = C²/γ²` entries.

mod bilinear;
mod normalize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bilinear::{
    bilinear_pool_dual, bilinear_pool_dual_backward, bilinear_pool_self, bilinear_pool_self_backward,
    channel_reduce,
};
pub use normalize::{
    normalize_bilinear, normalize_bilinear_backward, softmax, L2_EPS, SSQRT_GRAD_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadVariant {
    #[serde(rename = "BaselineGAP")]
    BaselineGap,
    #[serde(rename = "BCNNDual")]
    BcnnDual,
    #[serde(rename = "FastBCNN")]
    FastBcnn,
    #[serde(rename = "LiteFBCN")]
    LiteFbcn,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 4] = [
        HeadVariant::BaselineGap,
        HeadVariant::BcnnDual,
        HeadVariant::FastBcnn,
        HeadVariant::LiteFbcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadVariant::BaselineGap => "BaselineGAP",
            HeadVariant::BcnnDual => "BCNNDual",
            HeadVariant::FastBcnn => "FastBCNN",
            HeadVariant::LiteFbcn => "LiteFBCN",
        }
    }

    /// Short command-line name.
    pub fn cli_name(self) -> &'static str {
        match self {
            HeadVariant::BaselineGap => "baseline",
            HeadVariant::BcnnDual => "bcnn",
            HeadVariant::FastBcnn => "fbcnn",
            HeadVariant::LiteFbcn => "litefbcn",
        }
    }

    pub fn from_cli_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.cli_name() == s || v.name() == s)
    }

    pub fn is_bilinear(self) -> bool {
        self != HeadVariant::BaselineGap
    }
}

fn default_gamma() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub variant: HeadVariant,
    /// Channel reduction factor; only read by `LiteFBCN`.
    #[serde(default = "default_gamma")]
    pub gamma: usize,
    pub num_classes: usize,
    #[serde(default = "default_true")]
    pub reducer_bias: bool,
}

impl HeadConfig {
    pub fn new(variant: HeadVariant, num_classes: usize) -> Self {
        HeadConfig {
            variant,
            gamma: 1,
            num_classes,
            reducer_bias: true,
        }
    }

    pub fn lite(gamma: usize, num_classes: usize) -> Self {
        HeadConfig {
            gamma,
            ..Self::new(HeadVariant::LiteFbcn, num_classes)
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.variant == HeadVariant::LiteFbcn {
            resolve_reduction(channels, self.gamma)?;
        }
        Ok(())
    }

    /// Length of the pooled vector fed to the classifier.
    pub fn feature_len(&self, channels: usize, channels_b: usize) -> Result<usize> {
        Ok(match self.variant {
            HeadVariant::BaselineGap => channels,
            HeadVariant::FastBcnn => channels * channels,
            HeadVariant::LiteFbcn => {
                let k = resolve_reduction(channels, self.gamma)?;
                k * k
            }
            HeadVariant::BcnnDual => channels * channels_b,
        })
    }
}

/// Filter count of the channel reducer: `K = C / γ`.
pub fn resolve_reduction(channels: usize, gamma: usize) -> Result<usize> {
    if gamma == 0 || !channels.is_multiple_of(gamma) {
        return Err(Error::NonDivisible { channels, gamma });
    }
    Ok(channels / gamma)
}

/// Closed-form parameter counts of a head, by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct HeadParamCount {
    pub reducer: usize,
    pub bn_trainable: usize,
    pub bn_running: usize,
    pub classifier: usize,
}

impl HeadParamCount {
    /// All scalars, batch norm counted as 4 per feature.
    pub fn total(&self) -> usize {
        self.reducer + self.bn_trainable + self.bn_running + self.classifier
    }

    /// Optimizer-visible scalars, batch norm counted as 2 per feature.
    pub fn trainable(&self) -> usize {
        self.reducer + self.bn_trainable + self.classifier
    }
}

/// Closed-form head size for a `C`-channel map (`channels_b` is the second
/// backbone's channel count, used only by `BCNNDual`).
pub fn head_param_count(config: &HeadConfig, channels: usize, channels_b: usize) -> Result<HeadParamCount> {
    let n = config.num_classes;
    let features = config.feature_len(channels, channels_b)?;
    let reducer = if config.variant == HeadVariant::LiteFbcn {
        let k = resolve_reduction(channels, config.gamma)?;
        channels * k + if config.reducer_bias { k } else { 0 }
    } else {
        0
    };
    let bn = if config.variant.is_bilinear() { 2 * features } else { 0 };
    Ok(HeadParamCount {
        reducer,
        bn_trainable: bn,
        bn_running: bn,
        classifier: features * n + n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduction_examples() {
        assert_eq!(resolve_reduction(1024, 4).unwrap(), 256);
        assert_eq!(resolve_reduction(1280, 8).unwrap(), 160);
        assert_eq!(resolve_reduction(64, 1).unwrap(), 64);
        assert!(matches!(
            resolve_reduction(10, 3),
            Err(Error::NonDivisible { channels: 10, gamma: 3 })
        ));
    }

    #[test]
    fn closed_form_examples() {
        let lite = head_param_count(&HeadConfig::lite(4, 5), 1024, 0).unwrap();
        assert_eq!(lite.reducer, 262_400);
        assert_eq!(lite.bn_trainable + lite.bn_running, 262_144);
        assert_eq!(lite.classifier, 327_685);
        assert_eq!(lite.total(), 852_229);

        let fast = head_param_count(&HeadConfig::new(HeadVariant::FastBcnn, 5), 1024, 0).unwrap();
        assert_eq!(fast.total(), 9_437_189);

        let gap = head_param_count(&HeadConfig::new(HeadVariant::BaselineGap, 5), 1024, 0).unwrap();
        assert_eq!(gap.total(), 5_125);
    }

    #[test]
    fn lighter_with_larger_gamma() {
        for c in (16..=512).step_by(8) {
            for n in 2..6 {
                let p = |g| head_param_count(&HeadConfig::lite(g, n), c, 0).unwrap().total();
                let fast = head_param_count(&HeadConfig::new(HeadVariant::FastBcnn, n), c, 0).unwrap().total();
                assert!(p(8) < p(4) && p(4) < p(2) && p(2) < fast, "C={c} n={n}");
            }
        }
    }

    #[test]
    fn config_json() {
        let cfg: HeadConfig = serde_json::from_str(r#"{"variant":"LiteFBCN","gamma":2,"num_classes":3}"#).unwrap();
        assert_eq!(cfg, HeadConfig::lite(2, 3));
        assert!(serde_json::from_str::<HeadConfig>(r#"{"variant":"LiteFBCN","num_classes":3,"bogus":1}"#).is_err());
        assert_eq!(HeadVariant::from_cli_name("bcnn"), Some(HeadVariant::BcnnDual));
    }
}
