//! The JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use litefbcn::pipeline::{CovarianceClassSpec, TrainConfig};
use litefbcn::{BackboneSpec, HeadConfig, HeadVariant, LayerSpec};
use serde::{Deserialize, Serialize};

use crate::Failure;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Alternating conv / depthwise-separable blocks.
    #[default]
    Micronet,
    /// No layers; the head sees the input directly.
    Identity,
    /// An explicit layer list.
    Custom,
}

fn default_widths() -> Vec<usize> {
    vec![8, 16, 32, 64]
}

fn default_strides() -> Vec<usize> {
    vec![1, 2, 2, 2]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    /// `(H, W, C)`; taken from the data when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<[usize; 3]>,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<LayerSpec>>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection {
            kind: BackboneKind::Micronet,
            input: None,
            widths: default_widths(),
            strides: default_strides(),
            layers: None,
        }
    }
}

impl BackboneSection {
    pub fn build(&self, data_shape: Option<[usize; 3]>) -> Result<BackboneSpec, Failure> {
        let input = match (self.input, data_shape) {
            (Some(a), Some(b)) if a != b => {
                return Err(Failure::usage(format!("backbone.input {a:?} does not match the data shape {b:?}")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => [32, 32, 1],
        };
        let spec = match self.kind {
            BackboneKind::Identity => BackboneSpec::identity(input),
            BackboneKind::Micronet => BackboneSpec::micronet(input, &self.widths, &self.strides)?,
            BackboneKind::Custom => {
                let layers = self.layers.clone().ok_or_else(|| Failure::usage("backbone.kind \"custom\" needs backbone.layers"))?;
                BackboneSpec { input, layers }
            }
        };
        spec.output_shape()?;
        Ok(spec)
    }
}

fn default_variant() -> HeadVariant {
    HeadVariant::LiteFbcn
}

fn default_gamma() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSection {
    pub variant: HeadVariant,
    pub gamma: usize,
    pub reducer_bias: bool,
    /// Taken from the data when absent; 3 for data-free commands.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
}

impl Default for HeadSection {
    fn default() -> Self {
        HeadSection {
            variant: default_variant(),
            gamma: default_gamma(),
            reducer_bias: true,
            num_classes: None,
        }
    }
}

impl HeadSection {
    pub fn build(&self, data_classes: Option<usize>) -> Result<HeadConfig, Failure> {
        let num_classes = match (self.num_classes, data_classes) {
            (Some(a), Some(b)) if a != b => {
                return Err(Failure::usage(format!("head.num_classes = {a} but the data has {b} classes")))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => 3,
        };
        Ok(HeadConfig {
            variant: self.variant,
            gamma: self.gamma,
            num_classes,
            reducer_bias: self.reducer_bias,
        })
    }
}

fn default_data_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Path to a `manifest.csv`, relative to the working directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Covariance spec generated in memory when no manifest is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<CovarianceClassSpec>,
    pub seed: u64,
    /// Keep every `group` of the manifest inside one fold.
    pub group_aware: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            manifest: None,
            synthetic: None,
            seed: default_data_seed(),
            group_aware: false,
        }
    }
}

fn default_folds() -> usize {
    5
}

fn default_eval_batch() -> usize {
    64
}

fn default_reps() -> usize {
    200
}

fn default_samples() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub folds: usize,
    pub batch_size: usize,
    /// Timed repetitions per configuration in `bench`.
    pub reps: usize,
    /// Batch size of the end-to-end gradient check.
    pub grad_check_samples: usize,
    /// Reduction factors benchmarked for LiteFBCN.
    pub gammas: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            folds: default_folds(),
            batch_size: default_eval_batch(),
            reps: default_reps(),
            grad_check_samples: default_samples(),
            gammas: vec![2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneSection,
    pub head: HeadSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<(), Failure> {
        write_json(&dir.join(RESOLVED_CONFIG), self)
    }
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))? + "\n";
    std::fs::write(path, text).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}
