use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_treatment: usize,
    pub df_error: usize,
    pub p_value: f64,
    pub significant: bool,
    pub ss_treatment: f64,
    pub ss_subjects: f64,
    pub ss_error: f64,
    /// Set when the error sum of squares vanishes while the treatment one
    /// does not; `F` is then infinite and `p` is reported as 0.
    pub degenerate: bool,
}

/// One-way within-subjects ANOVA on a `subjects × methods` score matrix.
pub fn rm_anova(scores: &[Vec<f64>]) -> Result<AnovaResult> {
    let n_subj = scores.len();
    let n_treat = scores.first().map_or(0, Vec::len);
    if n_subj < 2 || n_treat < 2 {
        return Err(Error::TooFewSamples {
            detail: format!("repeated-measures ANOVA needs ≥ 2 subjects and ≥ 2 methods, got {n_subj}×{n_treat}"),
        });
    }
    if scores.iter().any(|r| r.len() != n_treat || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::shape("rm_anova", "score matrix is ragged or has missing cells"));
    }
    let grand = scores.iter().flatten().sum::<f64>() / (n_subj * n_treat) as f64;
    let treat_means: Vec<f64> = (0..n_treat).map(|t| scores.iter().map(|r| r[t]).sum::<f64>() / n_subj as f64).collect();
    let subj_means: Vec<f64> = scores.iter().map(|r| r.iter().sum::<f64>() / n_treat as f64).collect();
    let ss_total: f64 = scores.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    let ss_treat = n_subj as f64 * treat_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ss_subj = n_treat as f64 * subj_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let mut ss_error = 0.0;
    for (s, row) in scores.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            ss_error += (v - subj_means[s] - treat_means[t] + grand).powi(2);
        }
    }
    let df_t = n_treat - 1;
    let df_e = (n_treat - 1) * (n_subj - 1);
    let tiny = 1e-12 * ss_total.max(f64::MIN_POSITIVE);
    let treat_zero = ss_treat <= tiny;
    let error_zero = ss_error <= tiny;
    let (f, p, degenerate) = if treat_zero {
        (0.0, 1.0, false)
    } else if error_zero {
        (f64::INFINITY, 0.0, true)
    } else {
        let f = (ss_treat / df_t as f64) / (ss_error / df_e as f64);
        (f, f_upper_tail(f, df_t as f64, df_e as f64), false)
    };
    Ok(AnovaResult {
        f,
        df_treatment: df_t,
        df_error: df_e,
        p_value: p,
        significant: p < ALPHA,
        ss_treatment: ss_treat,
        ss_subjects: ss_subj,
        ss_error,
        degenerate,
    })
}

/// `P(F > f)` for an `F(d1, d2)` variable.
pub fn f_upper_tail(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    regularized_incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)).clamp(0.0, 1.0)
}

/// Lanczos approximation (g = 7, n = 9) of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `I_x(a, b)` via the continued fraction (modified Lentz), using the
/// symmetry `I_x(a,b) = 1 − I_{1−x}(b,a)` where it converges faster.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn columns(cols: &[&[f64]]) -> Vec<Vec<f64>> {
        (0..cols[0].len()).map(|s| cols.iter().map(|c| c[s]).collect()).collect()
    }

    #[test]
    fn worked_example() {
        let r = rm_anova(&columns(&[&[1., 2., 3.], &[2., 4., 3.]])).unwrap();
        assert!((r.ss_treatment - 1.5).abs() < 1e-12);
        assert!((r.ss_subjects - 3.0).abs() < 1e-12);
        assert!((r.ss_error - 1.0).abs() < 1e-12);
        assert!((r.f - 3.0).abs() < 1e-12);
        assert_eq!((r.df_treatment, r.df_error), (1, 2));
        // F(1,2) upper tail at 3 equals 1 − √(3/5).
        assert!((r.p_value - (1.0 - (0.6f64).sqrt())).abs() < 1e-10);
        assert!(!r.significant);
    }

    #[test]
    fn identical_columns() {
        let r = rm_anova(&columns(&[&[0.9, 0.8, 0.7, 0.95], &[0.9, 0.8, 0.7, 0.95]])).unwrap();
        assert_eq!((r.f, r.p_value, r.significant), (0.0, 1.0, false));
    }

    #[test]
    fn degenerate_error() {
        let r = rm_anova(&columns(&[&[1., 2., 3.], &[2., 3., 4.]])).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_value, 0.0);
        assert!(r.significant);
    }

    #[test]
    fn invariances() {
        let base = columns(&[&[0.91, 0.85, 0.88, 0.93, 0.80], &[0.95, 0.90, 0.87, 0.96, 0.86], &[0.70, 0.75, 0.72, 0.69, 0.71]]);
        let r = rm_anova(&base).unwrap();
        let mut rev = base.clone();
        rev.reverse();
        assert!((rm_anova(&rev).unwrap().f - r.f).abs() < 1e-9 * r.f);
        let shifted: Vec<Vec<f64>> = base.iter().map(|row| row.iter().map(|v| 3.0 * v + 7.0).collect()).collect();
        let s = rm_anova(&shifted).unwrap();
        assert!((s.p_value - r.p_value).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(rm_anova(&[vec![1.0, 2.0]]).is_err());
        assert!(rm_anova(&[vec![1.0], vec![2.0]]).is_err());
        assert!(rm_anova(&[vec![1.0, 2.0], vec![2.0]]).is_err());
        assert!(rm_anova(&[vec![1.0, f64::NAN], vec![2.0, 3.0]]).is_err());
    }

    #[test]
    fn special_functions() {
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-12);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-12);
        assert!((regularized_incomplete_beta(1.0, 1.0, 0.3) - 0.3).abs() < 1e-14);
        assert!((regularized_incomplete_beta(2.0, 3.0, 0.4) - 0.5248).abs() < 1e-12);
    }
}
