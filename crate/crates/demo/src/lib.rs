//! wasm-bindgen bindings for `www/index.html`.
//!
//! Every export returns a JSON string. The `*_json` functions are the plain
//! Rust versions used by the native tests.

use litefbcn::heads::{bilinear_pool_self, channel_reduce, head_param_count, normalize_bilinear};
use litefbcn::model::estimate_flops;
use litefbcn::pipeline::{bayes_classify, sample_covariance_dataset, CovarianceClassSpec};
use litefbcn::{BackboneSpec, HeadConfig, HeadVariant, ModelSpec, Tensor};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// Spatial size of the cost table's feature map.
const COST_MAP: usize = 7;

fn err(e: impl ToString) -> String {
    e.to_string()
}

/// Draws one 8×8×4 sample of `class` from the three-class covariance set,
/// reduces it with a fixed group-mean 1×1 reducer (C → C/γ) and returns the
/// normalized K×K self-bilinear matrix.
pub fn bilinear_heatmap_json(class: usize, gamma: usize, seed: u64) -> Result<Value, String> {
    let mut spec = CovarianceClassSpec::three_class_default(1);
    let c = spec.channels();
    if class >= spec.classes.len() {
        return Err(format!("class must be below {}", spec.classes.len()));
    }
    if gamma == 0 || !c.is_multiple_of(gamma) {
        return Err(format!("gamma must divide {c}"));
    }
    let name = spec.classes[class].name.clone();
    let covariance = spec.classes[class].covariance.clone();
    spec.classes = vec![spec.classes[class].clone()];
    let sample = sample_covariance_dataset::<f64>(&spec, seed).map_err(err)?.samples;

    let k = c / gamma;
    let weights = Tensor::from_fn(&[1, 1, c, k], |i| if (i / k) / gamma == i % k { 1.0 / gamma as f64 } else { 0.0 });
    let reduced = channel_reduce(&sample, &weights, None).map_err(err)?;
    let pooled = bilinear_pool_self(&reduced).map_err(err)?;
    let normalized = normalize_bilinear(&pooled).map_err(err)?;
    let rows: Vec<Vec<f64>> = normalized.data().chunks(k).map(<[f64]>::to_vec).collect();

    let full = CovarianceClassSpec::three_class_default(1);
    let guess = bayes_classify(&full, sample.data()).map_err(err)?;
    Ok(json!({
        "class": name,
        "k": k,
        "vector_len": k * k,
        "matrix": rows,
        "covariance": covariance,
        "bayes_guess": full.classes[guess].name,
    }))
}

/// Parameters, head FLOPs and vector length of every head on a
/// `7×7×channels` map.
pub fn head_costs_json(channels: usize, num_classes: usize) -> Result<Value, String> {
    if channels == 0 || num_classes == 0 {
        return Err("channels and classes must be positive".into());
    }
    let mut heads = vec![
        HeadConfig::new(HeadVariant::BaselineGap, num_classes),
        HeadConfig::new(HeadVariant::FastBcnn, num_classes),
    ];
    heads.extend([2, 4, 8, 16].into_iter().filter(|g| channels.is_multiple_of(*g)).map(|g| HeadConfig::lite(g, num_classes)));
    let mut rows = Vec::new();
    for head in heads {
        let params = head_param_count(&head, channels, channels).map_err(err)?;
        let spec = ModelSpec::new(BackboneSpec::identity([COST_MAP, COST_MAP, channels]), head.clone());
        let flops = estimate_flops(&spec).map_err(err)?.head();
        let lite = head.variant == HeadVariant::LiteFbcn;
        rows.push(json!({
            "head": head.variant.name(),
            "gamma": if lite { Some(head.gamma) } else { None },
            "params": params.total(),
            "trainable": params.trainable(),
            "flops": flops,
            "vector_len": spec.feature_len().map_err(err)?,
        }));
    }
    Ok(json!({ "channels": channels, "classes": num_classes, "map": COST_MAP, "rows": rows }))
}

/// Signed square root then ℓ2 normalization of one vector.
pub fn normalize_chain_json(values: &[f64]) -> Result<Value, String> {
    if values.is_empty() {
        return Err("enter at least one number".into());
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err("values must be finite".into());
    }
    let x = Tensor::new(vec![1, values.len()], values.to_vec()).map_err(err)?;
    let ssqrt: Vec<f64> = values.iter().map(|v| v.signum() * v.abs().sqrt()).collect();
    let y = normalize_bilinear(&x).map_err(err)?;
    let norm = y.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(json!({ "input": values, "signed_sqrt": ssqrt, "normalized": y.data(), "norm": norm }))
}

fn to_js(r: Result<Value, String>) -> Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn bilinear_heatmap(class: usize, gamma: usize, seed: u32) -> Result<String, JsValue> {
    to_js(bilinear_heatmap_json(class, gamma, seed as u64))
}

#[wasm_bindgen]
pub fn head_costs(channels: usize, num_classes: usize) -> Result<String, JsValue> {
    to_js(head_costs_json(channels, num_classes))
}

#[wasm_bindgen]
pub fn normalize_chain(values: Vec<f64>) -> Result<String, JsValue> {
    to_js(normalize_chain_json(&values))
}
