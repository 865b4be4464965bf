use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::BnMode;
use crate::pipeline::Dataset;
use crate::tensor::{Scalar, Tensor};

/// Pooled feature vectors of every sample in dataset order: the normalized
/// bilinear vector for bilinear heads, the GAP vector for the baseline.
pub fn extract_features<T: Scalar>(model: &Model<T>, data: &Dataset<T>, batch_size: usize) -> Result<Tensor<T>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut parts = Vec::new();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        parts.push(model.forward(&x, BnMode::Infer, false)?.features);
    }
    let len = parts[0].shape()[1];
    let data: Vec<T> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(vec![indices.len(), len], data)
}

/// Writes `label,f0,f1,...` with one row per sample.
pub fn export_features<T: Scalar>(model: &Model<T>, data: &Dataset<T>, out: &Path) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::TooFewSamples { detail: "no samples to export".into() });
    }
    let features = extract_features(model, data, 64)?;
    let len = features.shape()[1];
    let mut w = csv::Writer::from_path(out)?;
    let mut header = vec!["label".to_string()];
    header.extend((0..len).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for (row, &label) in features.data().chunks_exact(len).zip(&data.labels) {
        let mut rec = Vec::with_capacity(len + 1);
        rec.push(label.to_string());
        rec.extend(row.iter().map(|v| v.as_f64().to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(data.len())
}
