//! Metrics, repeated-measures ANOVA, feature export and efficiency reports.

pub mod anova;
pub mod efficiency;
pub mod features;
pub mod metrics;

pub use anova::{f_upper_tail, regularized_incomplete_beta, rm_anova, AnovaResult, ALPHA};
pub use efficiency::{benchmark_latency, efficiency_report, host_descriptor, standard_head_grid, EfficiencyReport, EfficiencyRow, LatencyReport};
pub use features::{export_features, extract_features};
pub use metrics::{confusion, mean_std, metrics, ClassMetrics, ConfusionMatrix, MetricsReport};
