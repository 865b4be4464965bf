//! Synthetic covariance-texture data and the dataset manifest.
//!
//! Every class shares a zero mean and differs only in the channel covariance
//! of its pixels, so the class signal is purely second-order: spatial
//! averaging removes it while bilinear pooling keeps it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_rtf_as, write_rtf, Scalar, Tensor, RTF_EXTENSION};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassCovariance {
    pub name: String,
    /// `K_gen × K_gen` symmetric positive-definite matrix.
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceClassSpec {
    pub height: usize,
    pub width: usize,
    pub samples_per_class: usize,
    pub classes: Vec<ClassCovariance>,
    /// When set, consecutive samples of a class are grouped into subjects of
    /// this size (written to the manifest's `group` column).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_subject: Option<usize>,
}

impl CovarianceClassSpec {
    /// Three 4-channel classes on 8×8 maps: identity; a strongly correlated
    /// first channel pair; anisotropic diagonal `(2, 2, ½, ½)`.
    pub fn three_class_default(samples_per_class: usize) -> Self {
        let mut corr = identity(4);
        corr[0][1] = 0.9;
        corr[1][0] = 0.9;
        let diag = vec![
            vec![2.0, 0.0, 0.0, 0.0],
            vec![0.0, 2.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.0],
            vec![0.0, 0.0, 0.0, 0.5],
        ];
        CovarianceClassSpec {
            height: 8,
            width: 8,
            samples_per_class,
            classes: vec![
                ClassCovariance { name: "isotropic".into(), covariance: identity(4) },
                ClassCovariance { name: "correlated".into(), covariance: corr },
                ClassCovariance { name: "anisotropic".into(), covariance: diag },
            ],
            samples_per_subject: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.classes.first().map_or(0, |c| c.covariance.len())
    }

    /// Cholesky factors of every class; fails on the first class that is not
    /// symmetric positive definite.
    pub fn cholesky_factors(&self) -> Result<Vec<Vec<Vec<f64>>>> {
        let k = self.channels();
        if self.height == 0 || self.width == 0 || k == 0 || self.classes.is_empty() {
            return Err(Error::Config("dataset spec needs positive H, W, channels and ≥ 1 class".into()));
        }
        self.classes
            .iter()
            .enumerate()
            .map(|(class, c)| {
                let m = &c.covariance;
                if m.len() != k || m.iter().any(|row| row.len() != k) {
                    return Err(Error::Config(format!("covariance of class {class} is not {k}×{k}")));
                }
                for i in 0..k {
                    for j in 0..i {
                        if (m[i][j] - m[j][i]).abs() > 1e-12 * m[i][j].abs().max(1.0) {
                            return Err(Error::NotPositiveDefinite { class });
                        }
                    }
                }
                cholesky(m).ok_or(Error::NotPositiveDefinite { class })
            })
            .collect()
    }
}

/// Bayes-rule classifier for data drawn from `spec`: the class whose
/// zero-mean Gaussian gives the `(H, W, K)` sample the highest likelihood.
pub fn bayes_classify<T: Scalar>(spec: &CovarianceClassSpec, sample: &[T]) -> Result<usize> {
    let factors = spec.cholesky_factors()?;
    let k = spec.channels();
    let mut best = (f64::NEG_INFINITY, 0);
    for (class, l) in factors.iter().enumerate() {
        let log_det: f64 = 2.0 * (0..k).map(|i| l[i][i].ln()).sum::<f64>();
        let mut ll = 0.0;
        let mut y = vec![0.0; k];
        for px in sample.chunks_exact(k) {
            // Forward substitution L·y = x, so that xᵀΣ⁻¹x = ‖y‖².
            for i in 0..k {
                let s: f64 = (0..i).map(|j| l[i][j] * y[j]).sum();
                y[i] = (px[i].as_f64() - s) / l[i][i];
            }
            ll -= 0.5 * (y.iter().map(|v| v * v).sum::<f64>() + log_det);
        }
        if ll > best.0 {
            best = (ll, class);
        }
    }
    Ok(best.1)
}

pub fn identity(k: usize) -> Vec<Vec<f64>> {
    (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// Lower-triangular `L` with `L·Lᵀ = m`, or `None` if `m` is not positive definite.
pub fn cholesky(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let k = m.len();
    let mut l = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..=i {
            let s: f64 = (0..j).map(|t| l[i][t] * l[j][t]).sum();
            if i == j {
                let d = m[i][i] - s;
                if d <= 0.0 || !d.is_finite() {
                    return None;
                }
                l[i][i] = d.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// In-memory labelled samples `(N, H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub samples: Tensor<T>,
    pub labels: Vec<usize>,
    pub groups: Vec<Option<String>>,
    pub class_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.samples.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given rows into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per = self.samples.len() / self.len();
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.samples.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(shape, data)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Draws the samples of [`gen_covariance_dataset`] without touching disk.
/// Sample `i` (class-major order) uses ChaCha8 stream `i` of `seed`, so each
/// sample is independent of how many others are generated.
pub fn sample_covariance_dataset<T: Scalar>(spec: &CovarianceClassSpec, seed: u64) -> Result<Dataset<T>> {
    let factors = spec.cholesky_factors()?;
    let k = spec.channels();
    let pixels = spec.height * spec.width;
    let n = spec.classes.len() * spec.samples_per_class;
    if n == 0 {
        return Err(Error::Config("samples_per_class must be positive".into()));
    }
    let mut data = Vec::with_capacity(n * pixels * k);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut z = vec![0.0f64; k];
    for (class, l) in factors.iter().enumerate() {
        for s in 0..spec.samples_per_class {
            let index = (class * spec.samples_per_class + s) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index);
            for _ in 0..pixels {
                for zi in z.iter_mut() {
                    *zi = StandardNormal.sample(&mut rng);
                }
                for row in l {
                    let v: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                    data.push(T::from_f64(v));
                }
            }
            labels.push(class);
            groups.push(spec.samples_per_subject.map(|g| format!("c{class}s{}", s / g.max(1))));
        }
    }
    Ok(Dataset {
        samples: Tensor::new(vec![n, spec.height, spec.width, k], data)?,
        labels,
        groups,
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: usize,
    #[serde(default)]
    pub group: Option<String>,
}

/// `manifest.csv` (`path,label,group`) plus the class-name table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory that relative sample paths are resolved against.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in &self.rows {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn write(&self, manifest_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(manifest_path)?;
        w.write_record(["path", "label", "group"])?;
        for r in &self.rows {
            w.write_record([r.path.as_str(), &r.label.to_string(), r.group.as_deref().unwrap_or("")])?;
        }
        w.flush().map_err(|e| Error::io(manifest_path, e))?;
        let classes = manifest_path.with_file_name(CLASSES_FILE);
        let text: String = self.class_names.iter().map(|n| format!("{n}\n")).collect();
        fs::write(&classes, text).map_err(|e| Error::io(classes, e))
    }

    /// Reads a manifest; class names come from `classes.txt` beside it when
    /// present, otherwise `class0..` up to the largest label.
    pub fn read(manifest_path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(manifest_path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "label", "group"] {
            return Err(Error::Config(format!(
                "{}: header must be `path,label,group`, found `{}`",
                manifest_path.display(),
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in r.deserialize() {
            let mut row: ManifestRow = rec?;
            if row.group.as_deref() == Some("") {
                row.group = None;
            }
            rows.push(row);
        }
        let classes = manifest_path.with_file_name(CLASSES_FILE);
        let class_names = if classes.exists() {
            fs::read_to_string(&classes)
                .map_err(|e| Error::io(&classes, e))?
                .lines()
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect()
        } else {
            let n = rows.iter().map(|r| r.label + 1).max().unwrap_or(0);
            (0..n).map(|i| format!("class{i}")).collect::<Vec<_>>()
        };
        for row in &rows {
            if row.label >= class_names.len() {
                return Err(Error::LabelOutOfRange { label: row.label, n_classes: class_names.len() });
            }
        }
        Ok(DatasetManifest {
            root: manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
            class_names,
        })
    }

    /// Loads every referenced sample; all must share one shape.
    pub fn load<T: Scalar>(&self) -> Result<Dataset<T>> {
        if self.rows.is_empty() {
            return Err(Error::TooFewSamples { detail: "manifest has no rows".into() });
        }
        let mut items = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let t: Tensor<T> = read_rtf_as(self.root.join(&row.path))?;
            if t.rank() != 3 {
                return Err(Error::shape("manifest", format!("{} has shape {:?}, expected (H,W,C)", row.path, t.shape())));
            }
            if let Some(first) = items.first() {
                let first: &Tensor<T> = first;
                if first.shape() != t.shape() {
                    return Err(Error::shape(
                        "manifest",
                        format!("{} has shape {:?}, expected {:?}", row.path, t.shape(), first.shape()),
                    ));
                }
            }
            items.push(t);
        }
        let refs: Vec<&Tensor<T>> = items.iter().collect();
        Ok(Dataset {
            samples: Tensor::stack(&refs)?,
            labels: self.rows.iter().map(|r| r.label).collect(),
            groups: self.rows.iter().map(|r| r.group.clone()).collect(),
            class_names: self.class_names.clone(),
        })
    }
}

/// Writes one `f32` `.rtf-tensor` per sample under `out/samples/` plus
/// `out/manifest.csv` and `out/classes.txt`.
pub fn gen_covariance_dataset(spec: &CovarianceClassSpec, seed: u64, out: &Path) -> Result<DatasetManifest> {
    let data = sample_covariance_dataset::<f32>(spec, seed)?;
    let samples_dir = out.join("samples");
    fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    let mut rows = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let label = data.labels[i];
        let rel = format!("samples/c{label}_{i:06}.{RTF_EXTENSION}");
        let sample = data.samples.batch_slice(i, 1)?.reshape(&data.sample_shape())?;
        write_rtf(out.join(&rel), &sample)?;
        rows.push(ManifestRow { path: rel, label, group: data.groups[i].clone() });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        rows,
        class_names: data.class_names,
    };
    manifest.write(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}
