use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_rtf_as, write_rtf, DType, Scalar, Tensor, RTF_EXTENSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Batch-norm moving statistic; updated by the forward pass, never by SGD.
    Running,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Named parameters in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Param<T>>,
}

/// One line of a checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, Param { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!("`{name}` is {:?}, got {:?}", slot.shape(), value.shape()),
            ));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(n, p)| (n, &p.tensor))
    }

    /// Total scalar count split as `(trainable, running)`.
    pub fn scalar_counts(&self) -> (usize, usize) {
        self.iter().fold((0, 0), |(t, r), (_, p)| match p.kind {
            ParamKind::Trainable => (t + p.tensor.len(), r),
            ParamKind::Running => (t, r + p.tensor.len()),
        })
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Writes one `.rtf-tensor` per parameter into `dir` and returns the
    /// manifest entries in enumeration order.
    pub fn save(&self, dir: &Path) -> Result<Vec<ParamEntry>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.len());
        for (name, p) in self.iter() {
            let file = format!("{name}.{RTF_EXTENSION}");
            write_rtf(dir.join(&file), &p.tensor)?;
            entries.push(ParamEntry {
                name: name.to_string(),
                file,
                kind: p.kind,
                shape: p.tensor.shape().to_vec(),
                dtype: T::DTYPE,
            });
        }
        Ok(entries)
    }

    pub fn load(dir: &Path, entries: &[ParamEntry]) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in entries {
            let t: Tensor<T> = read_rtf_as(dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::shape(
                    "ParamStore::load",
                    format!("`{}` manifest says {:?}, file has {:?}", e.name, e.shape, t.shape()),
                ));
            }
            store.insert(e.name.clone(), t, e.kind)?;
        }
        Ok(store)
    }
}

/// Kaiming-uniform initialization: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)))
}
