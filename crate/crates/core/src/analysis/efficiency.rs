use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::heads::{resolve_reduction, HeadConfig, HeadVariant};
use crate::model::{estimate_flops, Model, ModelSpec};
use crate::nn::{BackboneSpec, BnMode};
use crate::tensor::{Scalar, Tensor};

pub const WARMUP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub reps: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub host: String,
}

/// `os/arch, N logical cpus, profile`; timings run on the calling thread.
pub fn host_descriptor() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("{}/{} {cpus} cpus {profile} build, 1 thread", std::env::consts::OS, std::env::consts::ARCH)
}

/// Times `reps` single-image inference passes after `warmup` untimed ones.
pub fn benchmark_latency<T: Scalar>(model: &Model<T>, reps: usize, warmup: usize) -> Result<LatencyReport> {
    if reps == 0 {
        return Err(Error::Config("reps must be positive".into()));
    }
    let [h, w, c] = model.spec.backbone.input;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor::from_fn(&[1, h, w, c], |_| T::from_f64(rng.random_range(-1.0..1.0)));
    for _ in 0..warmup {
        std::hint::black_box(model.forward(&input, BnMode::Infer, false)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(model.forward(std::hint::black_box(&input), BnMode::Infer, false)?);
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(summarize(&times))
}

fn summarize(times: &[f64]) -> LatencyReport {
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let std = (sorted.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    LatencyReport { reps: n, median_ms: median, mean_ms: mean, std_ms: std, host: host_descriptor() }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyRow {
    pub head: String,
    pub gamma: Option<usize>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub head_params_closed_form: usize,
    pub head_params_counted: usize,
    pub flops: u64,
    pub head_flops: u64,
    pub vector_len: usize,
    /// `K(C+K) < C²` for LiteFBCN rows.
    pub cheaper_than_fast_bcnn: Option<bool>,
    pub median_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
    pub host: Option<String>,
}

/// Baseline, FastBCNN and LiteFBCN at each `gamma` on one backbone.
pub fn standard_head_grid(backbone: &BackboneSpec, num_classes: usize, gammas: &[usize]) -> Vec<ModelSpec> {
    let mut out = vec![
        ModelSpec::new(backbone.clone(), HeadConfig::new(HeadVariant::BaselineGap, num_classes)),
        ModelSpec::new(backbone.clone(), HeadConfig::new(HeadVariant::FastBcnn, num_classes)),
    ];
    out.extend(gammas.iter().map(|&g| ModelSpec::new(backbone.clone(), HeadConfig::lite(g, num_classes))));
    out
}

/// Counts, FLOPs and (when `reps` is given) median latency per model.
pub fn efficiency_report(specs: &[ModelSpec], reps: Option<usize>) -> Result<EfficiencyReport> {
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let model = Model::<f32>::build(spec.clone(), 0)?;
        let counted = model.count_params();
        let (head_t, head_r) = counted.with_prefix("head");
        let closed = spec.head_param_count()?;
        let flops = estimate_flops(spec)?;
        let c = spec.feature_shapes()?.0[2];
        let head = &spec.head;
        let lite = head.variant == HeadVariant::LiteFbcn;
        let cheaper = if lite {
            let k = resolve_reduction(c, head.gamma)?;
            Some(k * (c + k) < c * c)
        } else {
            None
        };
        let median_ms = match reps {
            Some(r) => Some(benchmark_latency(&model, r, WARMUP)?.median_ms),
            None => None,
        };
        rows.push(EfficiencyRow {
            head: head.variant.name().to_string(),
            gamma: lite.then_some(head.gamma),
            trainable_params: counted.trainable,
            total_params: counted.total(),
            head_params_closed_form: closed.total(),
            head_params_counted: head_t + head_r,
            flops: flops.total(),
            head_flops: flops.head(),
            vector_len: spec.feature_len()?,
            cheaper_than_fast_bcnn: cheaper,
            median_ms,
        });
    }
    Ok(EfficiencyReport { rows, host: reps.map(|_| host_descriptor()) })
}

const COLUMNS: [&str; 10] = [
    "head",
    "gamma",
    "trainable_params",
    "total_params",
    "head_params_closed_form",
    "head_params_counted",
    "flops",
    "head_flops",
    "vector_len",
    "median_ms",
];

impl EfficiencyReport {
    fn cells(&self) -> Vec<Vec<String>> {
        self.rows
            .iter()
            .map(|r| {
                vec![
                    r.head.clone(),
                    r.gamma.map_or("N/A".into(), |g| g.to_string()),
                    r.trainable_params.to_string(),
                    r.total_params.to_string(),
                    r.head_params_closed_form.to_string(),
                    r.head_params_counted.to_string(),
                    r.flops.to_string(),
                    r.head_flops.to_string(),
                    r.vector_len.to_string(),
                    r.median_ms.map_or("N/A".into(), |m| format!("{m:.4}")),
                ]
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = COLUMNS.join(",");
        s.push('\n');
        for row in self.cells() {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Right-aligned columns, header underlined.
    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|i| cells.iter().map(|r| r[i].len()).chain([COLUMNS[i].len()]).max().unwrap_or(0))
            .collect();
        let line = |row: &[String]| {
            row.iter().zip(&widths).map(|(c, &w)| format!("{c:>w$}")).collect::<Vec<_>>().join("  ")
        };
        let header: Vec<String> = COLUMNS.iter().map(|s| s.to_string()).collect();
        let mut out = line(&header);
        out.push('\n');
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        if let Some(h) = &self.host {
            out.push_str(&format!("host: {h}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rep_median_is_that_sample() {
        let r = summarize(&[3.5]);
        assert_eq!((r.median_ms, r.mean_ms, r.std_ms), (3.5, 3.5, 0.0));
        assert_eq!(summarize(&[4.0, 1.0, 2.0, 3.0]).median_ms, 2.5);
    }

    #[test]
    fn report_rows_and_na_gamma() {
        let specs = standard_head_grid(&BackboneSpec::identity([4, 4, 16]), 3, &[2, 4, 8]);
        let report = efficiency_report(&specs, None).unwrap();
        assert_eq!(report.rows.len(), 5);
        for r in &report.rows {
            assert_eq!(r.head_params_closed_form, r.head_params_counted);
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.lines().nth(1).unwrap().starts_with("BaselineGAP,N/A,"));
        assert!(csv.lines().nth(2).unwrap().starts_with("FastBCNN,N/A,"));
        let lite: Vec<usize> = report.rows[2..].iter().map(|r| r.total_params).collect();
        assert!(lite[0] > lite[1] && lite[1] > lite[2]);
        assert!(report.rows[2..].iter().all(|r| r.head_flops < report.rows[1].head_flops));
        assert!(report.to_text().contains("N/A"));
    }

    #[test]
    fn latency_runs() {
        let spec = ModelSpec::new(BackboneSpec::identity([4, 4, 8]), HeadConfig::lite(2, 2));
        let m = Model::<f32>::build(spec, 0).unwrap();
        let r = benchmark_latency(&m, 3, 1).unwrap();
        assert_eq!(r.reps, 3);
        assert!(r.median_ms >= 0.0);
    }
}
