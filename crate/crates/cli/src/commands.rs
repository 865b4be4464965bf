use std::fs;
use std::path::{Path, PathBuf};

use litefbcn::analysis::{
    confusion, efficiency_report, export_features, metrics, mean_std, rm_anova, standard_head_grid, MetricsReport,
};
use litefbcn::model::{check_head_variants, check_layer_kinds, grad_check_backbone, GradCheckOptions};
use litefbcn::pipeline::{
    evaluate, gen_covariance_dataset, sample_covariance_dataset, stratified_kfold, train, CovarianceClassSpec, Dataset,
    DatasetManifest, TrainConfig,
};
use litefbcn::{HeadConfig, HeadVariant, Model, ModelSpec};

use crate::config::{write_json, RunConfig};
use crate::{Command, Failure, Metric};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "fold,accuracy,precision,recall,f1";
pub const AGGREGATE_LABEL: &str = "mean ± std";
/// Largest relative error `grad-check` accepts.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::GenData { spec, out, seed } => gen_data(&spec, &out, seed),
        Command::Crossval { config, folds, head, gamma, seed, epochs, data, out } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(k) = folds {
                cfg.eval.folds = k;
            }
            if let Some(name) = head {
                cfg.head.variant = parse_head(&name)?;
            }
            if let Some(g) = gamma {
                cfg.head.gamma = g;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(d) = data {
                cfg.data.manifest = Some(d);
            }
            crossval(&cfg, &out)
        }
        Command::Compare { runs, metric } => compare(&runs, metric),
        Command::Bench { config, heads, reps, out } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(r) = reps {
                cfg.eval.reps = r;
            }
            bench(&cfg, &heads, out.as_deref())
        }
        Command::GradCheck { config, samples, corrupt_gradient } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = samples {
                cfg.eval.grad_check_samples = s;
            }
            grad_check(&cfg, config.is_some(), corrupt_gradient)
        }
        Command::ExportFeatures { checkpoint, data, out } => export(&checkpoint, &data, &out),
    }
}

fn parse_head(name: &str) -> Result<HeadVariant, Failure> {
    HeadVariant::from_cli_name(name)
        .ok_or_else(|| Failure::usage(format!("unknown head `{name}`; expected baseline, bcnn, fbcnn or litefbcn")))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn gen_data(spec_path: &Path, out: &Path, seed: u64) -> Result<u8, Failure> {
    let spec: CovarianceClassSpec = read_json(spec_path)?;
    if let Err(litefbcn::Error::NotPositiveDefinite { class }) = spec.cholesky_factors() {
        let name = spec.classes.get(class).map_or("?", |c| c.name.as_str());
        return Err(Failure::usage(format!("covariance of class {class} ({name}) is not positive definite")));
    }
    create_dir(out)?;
    let manifest = gen_covariance_dataset(&spec, seed, out)?;
    let mut resolved = RunConfig::default();
    resolved.data.synthetic = Some(spec);
    resolved.data.seed = seed;
    resolved.write_resolved(out)?;
    for (c, n) in manifest.class_counts().iter().enumerate() {
        println!("class {c} ({}): {n} samples", manifest.class_names[c]);
    }
    println!("{} rows written to {}", manifest.rows.len(), out.join("manifest.csv").display());
    Ok(0)
}

/// Loads the manifest named by the config, or generates the configured
/// synthetic spec in memory.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset<f32>, Failure> {
    if let Some(path) = &cfg.data.manifest {
        if !path.exists() {
            return Err(Failure::usage(format!("manifest {} does not exist", path.display())));
        }
        return Ok(DatasetManifest::read(path)?.load()?);
    }
    if let Some(spec) = &cfg.data.synthetic {
        return Ok(sample_covariance_dataset(spec, cfg.data.seed)?);
    }
    Err(Failure::usage("no data: set data.manifest or data.synthetic in the config, or pass --data"))
}

fn percent(v: f64) -> String {
    format!("{:.4}", 100.0 * v)
}

pub fn summary_csv(reports: &[MetricsReport]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    let pick: [fn(&MetricsReport) -> f64; 4] =
        [|m| m.accuracy, |m| m.macro_precision, |m| m.macro_recall, |m| m.macro_f1];
    for (f, r) in reports.iter().enumerate() {
        let cells: Vec<String> = pick.iter().map(|p| percent(p(r))).collect();
        s.push_str(&format!("{},{}\n", r.fold.unwrap_or(f), cells.join(",")));
    }
    let agg: Vec<String> = pick
        .iter()
        .map(|p| {
            let vals: Vec<f64> = reports.iter().map(|r| 100.0 * p(r)).collect();
            let (m, sd) = mean_std(&vals);
            format!("{m:.2} ± {sd:.2}")
        })
        .collect();
    s.push_str(&format!("{AGGREGATE_LABEL},{}\n", agg.join(",")));
    s
}

fn crossval(cfg: &RunConfig, out: &Path) -> Result<u8, Failure> {
    cfg.train.validate()?;
    let data = load_data(cfg)?;
    let backbone = cfg.backbone.build(Some(data.sample_shape()))?;
    let head: HeadConfig = cfg.head.build(Some(data.num_classes()))?;
    let spec = ModelSpec::new(backbone, head);
    spec.feature_shapes()?;
    let k = cfg.eval.folds;
    let folds = stratified_kfold(&data.labels, &data.groups, k, cfg.train.seed, cfg.data.group_aware)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let mut reports = Vec::with_capacity(k);
    for fold in &folds {
        let f = fold.index;
        let seed = cfg.train.seed.wrapping_add(f as u64);
        let tc = TrainConfig { seed, ..cfg.train.clone() };
        let model = Model::<f32>::build(spec.clone(), seed)?;
        let outcome = train(model, &data, fold, &tc)?;
        let test = evaluate(&outcome.best, &data, &fold.test, cfg.eval.batch_size, tc.l2_lambda)?;
        let mut report = metrics(&confusion(&test.predictions, &test.labels, data.num_classes())?);
        report.fold = Some(f);
        let dir = out.join(format!("fold{f}"));
        let ckpt = dir.join("checkpoint");
        create_dir(&ckpt)?;
        outcome.best.save(&ckpt)?;
        outcome.history.write_csv(&dir.join("history.csv"))?;
        write_json(&dir.join("metrics.json"), &report)?;
        eprintln!(
            "fold {f}: best epoch {} (val acc {:.4}), test acc {:.4}",
            outcome.best_epoch, outcome.best_val_acc, report.accuracy
        );
        reports.push(report);
    }
    let summary = summary_csv(&reports);
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, &summary).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))?;
    print!("{summary}");
    Ok(0)
}

/// Per-fold values of `metric` from a run's `summary.csv`.
pub fn read_summary(run: &Path, metric: Metric) -> Result<Vec<f64>, Failure> {
    let path = run.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let col = header
        .iter()
        .position(|h| *h == metric.name())
        .ok_or_else(|| Failure::usage(format!("{}: no `{}` column", path.display(), metric.name())))?;
    let mut values = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.first().is_some_and(|c| c.parse::<usize>().is_ok()) {
            let v = cells
                .get(col)
                .and_then(|c| c.parse::<f64>().ok())
                .ok_or_else(|| Failure::usage(format!("{}: bad row `{line}`", path.display())))?;
            values.push(v);
        }
    }
    Ok(values)
}

fn compare(runs: &[PathBuf], metric: Metric) -> Result<u8, Failure> {
    if runs.len() < 2 {
        return Err(Failure::usage("compare needs at least two runs"));
    }
    let columns = runs.iter().map(|r| read_summary(r, metric)).collect::<Result<Vec<_>, _>>()?;
    let n = columns[0].len();
    if let Some((i, c)) = columns.iter().enumerate().find(|(_, c)| c.len() != n) {
        return Err(Failure::usage(format!(
            "fold counts differ: {} has {n}, {} has {}",
            runs[0].display(),
            runs[i].display(),
            c.len()
        )));
    }
    let scores: Vec<Vec<f64>> = (0..n).map(|s| columns.iter().map(|c| c[s]).collect()).collect();
    let r = rm_anova(&scores)?;
    for (run, col) in runs.iter().zip(&columns) {
        let (m, sd) = mean_std(col);
        println!("{}: {} {m:.2} ± {sd:.2}", run.display(), metric.name());
    }
    println!("F({}, {}) = {:.6}", r.df_treatment, r.df_error, r.f);
    println!("p = {:.6}", r.p_value);
    if r.degenerate {
        println!("note: zero error variance");
    }
    let verdict = if r.significant { "significant" } else { "not significant" };
    println!("{verdict} at alpha = 0.05");
    Ok(0)
}

fn bench(cfg: &RunConfig, heads: &str, out: Option<&Path>) -> Result<u8, Failure> {
    let shape = cfg.data.synthetic.as_ref().map(|s| [s.height, s.width, s.channels()]);
    let classes = cfg.data.synthetic.as_ref().map(|s| s.classes.len());
    let backbone = cfg.backbone.build(shape)?;
    let n = cfg.head.build(classes)?.num_classes;
    let specs: Vec<ModelSpec> = if heads == "all" {
        standard_head_grid(&backbone, n, &cfg.eval.gammas)
    } else {
        let mut specs = Vec::new();
        for name in heads.split(',') {
            match parse_head(name.trim())? {
                HeadVariant::LiteFbcn => {
                    specs.extend(cfg.eval.gammas.iter().map(|&g| ModelSpec::new(backbone.clone(), HeadConfig::lite(g, n))))
                }
                v => specs.push(ModelSpec::new(backbone.clone(), HeadConfig::new(v, n))),
            }
        }
        specs
    };
    let reps = (cfg.eval.reps > 0).then_some(cfg.eval.reps);
    let report = efficiency_report(&specs, reps)?;
    print!("{}", report.to_text());
    for row in &report.rows {
        if let (Some(g), Some(ok)) = (row.gamma, row.cheaper_than_fast_bcnn) {
            println!("LiteFBCN gamma={g}: K(C+K) < C^2 {}", if ok { "holds" } else { "FAILS" });
        }
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        cfg.write_resolved(dir)?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))
        };
        write("efficiency.csv", report.to_csv())?;
        write("efficiency.txt", report.to_text())?;
    }
    Ok(0)
}

/// Without a config file the check runs on a 6×6 micronet that still has
/// every layer kind; deep ReLU stacks make kink crossings at h = 1e-5 likely.
fn grad_check(cfg: &RunConfig, use_config_backbone: bool, corrupt: bool) -> Result<u8, Failure> {
    let opts = GradCheckOptions { corrupt, lambda: cfg.train.l2_lambda, ..GradCheckOptions::default() };
    let backbone = if use_config_backbone { cfg.backbone.build(None)? } else { grad_check_backbone() };
    let n = cfg.head.build(None)?.num_classes;
    let mut ok = true;
    let mut line = |name: &str, err: f64| {
        let pass = err < GRAD_TOLERANCE;
        ok &= pass;
        println!("{name:<28} {err:>12.3e}  {}", if pass { "ok" } else { "FAIL" });
    };
    println!("layer kind (isolated)         max rel error");
    for (kind, err) in check_layer_kinds(cfg.train.seed, opts.h)? {
        line(&kind, err);
    }
    let reports = check_head_variants(&backbone, n, cfg.eval.grad_check_samples.max(1), cfg.train.seed, &opts)?;
    for (variant, r) in &reports {
        println!("\n{} end to end: {} coordinates, {} skipped at ReLU kinks", variant.name(), r.checked, r.skipped_kinks);
        for (group, err) in &r.groups {
            line(group, *err);
        }
    }
    println!("\n{}", if ok { "all gradients within 1e-4" } else { "gradient check FAILED" });
    Ok(if ok { 0 } else { 1 })
}

fn export(checkpoint: &Path, data: &Path, out: &Path) -> Result<u8, Failure> {
    if !checkpoint.join(litefbcn::model::MODEL_MANIFEST).exists() {
        return Err(Failure::usage(format!("{} is not a checkpoint directory", checkpoint.display())));
    }
    let model = Model::<f32>::load(checkpoint)?;
    let manifest = DatasetManifest::read(data)?;
    let dataset = manifest.load::<f32>()?;
    let rows = export_features(&model, &dataset, out)?;
    println!("{rows} rows written to {}", out.display());
    Ok(0)
}
