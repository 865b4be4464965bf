//! Acceptance checks. Prints one `criterion N: PASS|FAIL` line per check and
//! exits non-zero if any fails. Run with `cargo test -p litefbcn-cli --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use litefbcn::analysis::{confusion, metrics, rm_anova, ConfusionMatrix};
use litefbcn::heads::{bilinear_pool_self, normalize_bilinear};
use litefbcn::model::{check_head_variants, check_layer_kinds, estimate_flops, grad_check_backbone, GradCheckOptions};
use litefbcn::pipeline::{
    bayes_classify, evaluate, sample_covariance_dataset, stratified_kfold, train, CheckpointSelector,
    CovarianceClassSpec, PlateauScheduler, TrainConfig,
};
use litefbcn::{BackboneSpec, HeadConfig, HeadVariant, Model, ModelSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let mut worst = 0.0f64;
    for (kind, err) in check_layer_kinds(11, opts.h).map_err(|e| e.to_string())? {
        ensure(err < 1e-4, format!("{kind}: {err:.3e}"))?;
        worst = worst.max(err);
    }
    let reports = check_head_variants(&grad_check_backbone(), 3, 3, 11, &opts).map_err(|e| e.to_string())?;
    ensure(reports.len() == HeadVariant::ALL.len(), "missing head variant")?;
    for (variant, r) in &reports {
        for (group, err) in &r.groups {
            ensure(*err < 1e-4, format!("{} {group}: {err:.3e}", variant.name()))?;
        }
        worst = worst.max(r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("max rel error {worst:.2e} over all layer kinds and 4 heads, {secs:.1}s"))
}

fn bilinear_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..1000 {
        let (h, w, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..7));
        let f = Tensor::<f64>::from_fn(&[1, h, w, k], |_| rng.random_range(-2.0..2.0));
        let b = bilinear_pool_self(&f).map_err(|e| e.to_string())?;
        let b = b.data();
        let x = f.data();
        let inf = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let mut trace = 0.0;
        let mut energy = 0.0;
        for p in 0..k {
            trace += b[p * k + p];
            for q in 0..k {
                ensure(
                    (b[p * k + q] - b[q * k + p]).abs() <= 1e-6 * inf,
                    format!("trial {trial}: asymmetric"),
                )?;
                let mut naive = 0.0;
                for i in 0..h * w {
                    naive += x[i * k + p] * x[i * k + q];
                }
                ensure((naive - b[p * k + q]).abs() <= 1e-9 * (1.0 + inf), format!("trial {trial}: oracle mismatch"))?;
            }
        }
        for v in x {
            energy += v * v;
        }
        ensure((trace - energy).abs() <= 1e-5 * energy.max(1e-300), format!("trial {trial}: trace"))?;
        for _ in 0..4 {
            let v: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut q = 0.0;
            for p in 0..k {
                for r in 0..k {
                    q += v[p] * b[p * k + r] * v[r];
                }
            }
            let vv: f64 = v.iter().map(|a| a * a).sum();
            ensure(q >= -1e-9 * vv * inf, format!("trial {trial}: vᵀBv = {q}"))?;
        }
    }
    Ok("1000 maps symmetric, PSD, trace = Σ‖f‖², equal to the double loop".into())
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..500 {
        let len = rng.random_range(1..40);
        let x = Tensor::<f64>::from_fn(&[1, len], |_| rng.random_range(-5.0..5.0));
        let y = normalize_bilinear(&x).map_err(|e| e.to_string())?;
        let norm = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure((norm - 1.0).abs() <= 1e-6, format!("trial {trial}: norm {norm}"))?;
        let s = rng.random_range(1e-3..1e3);
        let xs = x.map(|v| v * s);
        let ys = normalize_bilinear(&xs).map_err(|e| e.to_string())?;
        let diff = y.data().iter().zip(ys.data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        ensure(diff <= 1e-6, format!("trial {trial}: scale {s} moved output by {diff}"))?;
    }
    let z = normalize_bilinear(&Tensor::<f64>::zeros(&[2, 9])).map_err(|e| e.to_string())?;
    ensure(z.data().iter().all(|v| *v == 0.0), "zero input not mapped to zero")?;
    Ok("unit norm, positive-scale invariant, 0 ↦ 0 without NaN".into())
}

fn param_accounting() -> Outcome {
    let mut cases = 0;
    for c in [64, 256, 1024] {
        for n in [2, 5] {
            let mut sizes = Vec::new();
            for g in [8, 4, 2] {
                sizes.push(head_size(c, HeadConfig::lite(g, n))?);
            }
            sizes.push(head_size(c, HeadConfig::new(HeadVariant::FastBcnn, n))?);
            ensure(sizes.windows(2).all(|w| w[0] < w[1]), format!("C={c} n={n}: not monotone {sizes:?}"))?;
            cases += 4;
        }
    }
    Ok(format!("{cases} configurations counted = closed form; γ=8 < γ=4 < γ=2 < FastBCNN"))
}

fn head_size(c: usize, head: HeadConfig) -> Result<usize, String> {
    let spec = ModelSpec::new(BackboneSpec::identity([2, 2, c]), head.clone());
    let closed = spec.head_param_count().map_err(|e| e.to_string())?;
    let model = Model::<f32>::build(spec, 0).map_err(|e| e.to_string())?;
    let counted = model.count_params().with_prefix("head");
    ensure(
        counted == (closed.trainable(), closed.bn_running),
        format!("C={c} {head:?}: counted {counted:?}, closed form {closed:?}"),
    )?;
    Ok(closed.total())
}

fn flop_ordering() -> Outcome {
    for c in [64, 256, 1024] {
        for n in [2, 5] {
            let fast = ModelSpec::new(BackboneSpec::identity([7, 7, c]), HeadConfig::new(HeadVariant::FastBcnn, n));
            let fast_flops = estimate_flops(&fast).map_err(|e| e.to_string())?.head();
            let fast_len = fast.feature_len().map_err(|e| e.to_string())?;
            for g in [2, 4, 8] {
                let k = c / g;
                ensure(k * (c + k) < c * c, format!("K(C+K) < C² fails at C={c} γ={g}"))?;
                let lite = ModelSpec::new(BackboneSpec::identity([7, 7, c]), HeadConfig::lite(g, n));
                let lite_flops = estimate_flops(&lite).map_err(|e| e.to_string())?.head();
                ensure(lite_flops < fast_flops, format!("C={c} γ={g}: {lite_flops} ≥ {fast_flops}"))?;
                let len = lite.feature_len().map_err(|e| e.to_string())?;
                ensure(len * g * g == fast_len, format!("C={c} γ={g}: vector {len} vs {fast_len}"))?;
            }
        }
    }
    Ok("LiteFBCN head FLOPs < FastBCNN on the grid; vector shrinks by γ²".into())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn separability() -> Outcome {
    let start = Instant::now();
    let spec = CovarianceClassSpec::three_class_default(200);
    let data = sample_covariance_dataset::<f32>(&spec, 42).map_err(|e| e.to_string())?;
    let fold = stratified_kfold(&data.labels, &data.groups, 5, 42, false).map_err(|e| e.to_string())?.remove(0);
    let per = data.samples.len() / data.len();
    let bayes = fold
        .test
        .iter()
        .filter(|&&i| bayes_classify(&spec, &data.samples.data()[i * per..(i + 1) * per]).ok() == Some(data.labels[i]))
        .count() as f64
        / fold.test.len() as f64;
    let backbone = BackboneSpec::identity(data.sample_shape());
    let run = |head: HeadConfig, seed: u64| -> Result<f64, String> {
        let config = TrainConfig { epochs: 200, seed, ..TrainConfig::default() };
        let model = Model::<f32>::build(ModelSpec::new(backbone.clone(), head), seed).map_err(|e| e.to_string())?;
        let out = train(model, &data, &fold, &config).map_err(|e| e.to_string())?;
        Ok(evaluate(&out.best, &data, &fold.test, 64, config.l2_lambda).map_err(|e| e.to_string())?.accuracy)
    };
    let mut lite = Vec::new();
    let mut gap = Vec::new();
    for seed in 0..5 {
        lite.push(run(HeadConfig::lite(2, 3), seed)?);
        gap.push(run(HeadConfig::new(HeadVariant::BaselineGap, 3), seed)?);
    }
    let (l, g) = (median(lite), median(gap));
    let secs = start.elapsed().as_secs_f64();
    let summary = format!("Bayes oracle {bayes:.3}, LiteFBCN median {l:.3}, GAP median {g:.3}, {secs:.0}s");
    ensure(l >= 0.90 && g <= 0.50 && l - g >= 0.30 && l <= bayes + 1e-9, summary.clone())?;
    ensure(secs < 600.0, summary.clone())?;
    Ok(summary)
}

fn protocol() -> Outcome {
    let mut sched = PlateauScheduler::new(0.01, 50, 10.0, 1e-4);
    let lrs: Vec<f64> = (0..200).map(|_| sched.step(1.0)).collect();
    let near = |a: f64, b: f64| (a - b).abs() < 1e-15;
    ensure(near(lrs[0], 0.01) && near(lrs[48], 0.01), format!("early lr {}", lrs[48]))?;
    ensure(near(lrs[50], 0.001), format!("lr after 50 flat epochs {}", lrs[50]))?;
    ensure(near(lrs[100], 1e-4) && near(lrs[199], 1e-4), format!("floor {}", lrs[199]))?;
    let trace = [(0.50, 1.0), (0.70, 0.9), (0.70, 0.8), (0.65, 0.5), (0.70, 0.85), (0.60, 0.4)];
    let mut best = CheckpointSelector::default();
    for (epoch, (acc, loss)) in trace.into_iter().enumerate() {
        best.offer(epoch, acc, loss);
    }
    ensure(best.epoch == Some(2), format!("retained epoch {:?}", best.epoch))?;
    Ok("lr 0.01 → 0.001 → 0.0001 (floor); best-accuracy epoch retained".into())
}

fn independent_anova(scores: &[Vec<f64>]) -> (f64, f64) {
    let n = scores.len() as f64;
    let k = scores[0].len() as f64;
    let grand = scores.iter().flatten().sum::<f64>() / (n * k);
    let mut ss_total = 0.0;
    let mut ss_rows = 0.0;
    let mut ss_cols = 0.0;
    for row in scores {
        let m = row.iter().sum::<f64>() / k;
        ss_rows += k * (m - grand).powi(2);
        ss_total += row.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    }
    for j in 0..scores[0].len() {
        let m = scores.iter().map(|r| r[j]).sum::<f64>() / n;
        ss_cols += n * (m - grand).powi(2);
    }
    let (d1, d2) = (k - 1.0, (k - 1.0) * (n - 1.0));
    let f = (ss_cols / d1) / ((ss_total - ss_rows - ss_cols) / d2);
    (f, FisherSnedecor::new(d1, d2).unwrap().sf(f))
}

fn metrics_and_anova() -> Outcome {
    let m = metrics(&ConfusionMatrix { counts: vec![vec![2, 0], vec![1, 1]] });
    let f0 = 2.0 * (2.0 / 3.0) / (2.0 / 3.0 + 1.0);
    let hand = [(m.accuracy, 0.75), (m.macro_precision, 5.0 / 6.0), (m.macro_recall, 0.75), (m.macro_f1, (f0 + 2.0 / 3.0) / 2.0)];
    ensure(hand.iter().all(|(a, b)| (a - b).abs() <= 1e-12), format!("2×2 metrics {hand:?}"))?;
    let cm = confusion(&[0, 1, 2, 2, 1, 0, 2], &[0, 1, 2, 1, 1, 2, 2], 3).map_err(|e| e.to_string())?;
    let m = metrics(&cm);
    // class 0: tp 1 fp 1 fn 0; class 1: tp 2 fp 0 fn 1; class 2: tp 2 fp 1 fn 1
    let p = (0.5 + 1.0 + 2.0 / 3.0) / 3.0;
    let r = (1.0 + 2.0 / 3.0 + 2.0 / 3.0) / 3.0;
    let f = (2.0 / 3.0 + 0.8 + 2.0 / 3.0) / 3.0;
    ensure((m.accuracy - 5.0 / 7.0).abs() <= 1e-12, "3×3 accuracy")?;
    ensure((m.macro_precision - p).abs() <= 1e-12 && (m.macro_recall - r).abs() <= 1e-12, "3×3 precision/recall")?;
    ensure((m.macro_f1 - f).abs() <= 1e-12, format!("3×3 f1 {} vs {f}", m.macro_f1))?;

    let worked = rm_anova(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 3.0]]).map_err(|e| e.to_string())?;
    ensure((worked.f - 3.0).abs() < 1e-12 && (worked.p_value - 0.2254).abs() < 1e-3, format!("worked example {worked:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..20 {
        let scores: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(0.6..1.0)).collect()).collect();
        let ours = rm_anova(&scores).map_err(|e| e.to_string())?;
        let (f, p) = independent_anova(&scores);
        ensure((ours.f - f).abs() <= 1e-6 && (ours.p_value - p).abs() <= 1e-4, format!("trial {trial}: F {} vs {f}, p {} vs {p}", ours.f, ours.p_value))?;
    }
    Ok(format!("hand metrics exact; F=3, p={:.4}; 20 random 5×4 matrices agree with statrs", worked.p_value))
}

fn crossval_run(config: &Path, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_litefbcn"))
        .args(["crossval", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), String::from_utf8_lossy(&status.stderr).into_owned())
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("config.json");
    let spec = CovarianceClassSpec::three_class_default(12);
    let doc = serde_json::json!({
        "backbone": {"kind": "identity"},
        "head": {"variant": "LiteFBCN", "gamma": 2},
        "train": {"epochs": 4, "seed": 5, "batch_size": 8},
        "data": {"synthetic": spec, "seed": 42},
        "eval": {"folds": 3}
    });
    fs::write(&config, doc.to_string()).map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    crossval_run(&config, &a)?;
    crossval_run(&config, &b)?;
    let files = files_under(&a);
    ensure(files == files_under(&b), "runs wrote different file sets")?;
    let checkpoints = files.iter().filter(|f| f.components().any(|c| c.as_os_str() == "checkpoint")).count();
    ensure(checkpoints >= 3, "no checkpoints written")?;
    for f in &files {
        ensure(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), format!("{} differs", f.display()))?;
    }
    Ok(format!("{} files bitwise identical ({checkpoints} checkpoint files, summary.csv)", files.len()))
}

fn main() -> ExitCode {
    let checks: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "gradient fidelity", gradients),
        (2, "bilinear algebra", bilinear_algebra),
        (3, "normalization chain", normalization),
        (4, "parameter accounting", param_accounting),
        (5, "FLOP ordering", flop_ordering),
        (6, "second-order separability", separability),
        (7, "training protocol", protocol),
        (8, "metrics and ANOVA", metrics_and_anova),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (n, name, check) in checks {
        match check() {
            Ok(detail) => println!("criterion {n}: PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
