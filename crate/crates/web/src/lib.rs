//! Browser bindings: the α schedule, the asymmetric-similarity gradient
//! split, and a toy pretraining run on 2-D projections.

use ainfonce::analysis::{distance_histogram, embed, run_pipeline};
use ainfonce::config::RunConfig;
use ainfonce::data::{gen_blobs, BlobsConfig, Split};
use ainfonce::losses::{anneal_alpha, sim_alpha, LossKind, ALPHA_MAX};
use ainfonce::tensor::{Graph, Matrix};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js_err(e: String) -> JsValue {
    JsValue::from_str(&e)
}

/// `points` samples of α(d) for d evenly spaced on `[0, 1.5 d_max]`,
/// interleaved as `[d0, α0, d1, α1, …]`.
pub fn anneal_curve_impl(alpha_min: f64, d_min: f64, d_max: f64, points: usize) -> Result<Vec<f64>, String> {
    let points = points.max(2);
    let mut out = Vec::with_capacity(2 * points);
    for k in 0..points {
        let d = 1.5 * d_max * k as f64 / (points - 1) as f64;
        out.push(d);
        out.push(anneal_alpha(alpha_min, ALPHA_MAX, d_min, d_max, d).map_err(|e| e.to_string())?);
    }
    Ok(out)
}

/// Value and gradients of the asymmetric similarity between the unit
/// vectors at angles `theta_a` and `theta_b`: `[sim, ∂a_x, ∂a_y, ∂b_x, ∂b_y]`.
pub fn gradient_split_impl(theta_a: f64, theta_b: f64, alpha: f64) -> Result<Vec<f64>, String> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err("alpha must be in [0, 1]".into());
    }
    let mut g = Graph::new();
    let a = g.param(Matrix::row_vector(vec![theta_a.cos(), theta_a.sin()]));
    let b = g.param(Matrix::row_vector(vec![theta_b.cos(), theta_b.sin()]));
    let s = sim_alpha(&mut g, a, b, alpha).map_err(|e| e.to_string())?;
    let grads = g.backward(s).map_err(|e| e.to_string())?;
    let (ga, gb) = (grads.get(a), grads.get(b));
    Ok(vec![g.value(s).item(), ga.get(0, 0), ga.get(0, 1), gb.get(0, 0), gb.get(0, 1)])
}

/// Pretrains a small encoder with 2-D projections on four blobs and
/// returns JSON with test embeddings, labels, the negative-pair distance
/// histogram, the per-epoch metrics and SA/RA of a linear probe.
pub fn toy_pretrain_impl(kind: &str, alpha: f64, anneal: bool, epochs: usize, seed: u64) -> Result<String, String> {
    let mut cfg = RunConfig::default().with_seed(seed);
    cfg.loss.kind = match kind {
        "infonce" => LossKind::Infonce,
        "ip" => LossKind::Ip,
        "hn" => LossKind::Hn,
        "ip_hn" => LossKind::IpHn,
        other => return Err(format!("unknown loss {other}")),
    };
    cfg.loss.alpha = alpha;
    cfg.anneal.enabled = anneal;
    cfg.data.blobs = BlobsConfig {
        classes: 4,
        dim: 8,
        train_per_class: 40,
        test_per_class: 25,
        spread: 0.1,
    };
    cfg.encoder.hidden = vec![16];
    cfg.encoder.proj = 2;
    cfg.pretrain.optim.epochs = epochs.clamp(1, 200);
    cfg.pretrain.optim.batch_size = 32;
    cfg.pretrain.attack.steps = 3;
    cfg.finetune.optim.epochs = 20;
    cfg.eval.attack.steps = 10;
    cfg.validate().map_err(|e| e.to_string())?;

    let train = gen_blobs(&cfg.data.blobs, seed, Split::Train).map_err(|e| e.to_string())?;
    let test = gen_blobs(&cfg.data.blobs, seed, Split::Test).map_err(|e| e.to_string())?;
    let r = run_pipeline(&cfg, &train, &test).map_err(|e| e.to_string())?;
    let z = embed(&r.encoder, &test).map_err(|e| e.to_string())?;
    let h = distance_histogram(&z, 20).map_err(|e| e.to_string())?;
    Ok(json!({
        "embeddings": z.as_slice(),
        "labels": test.y,
        "histogram": h.density,
        "mean_distance": h.mean,
        "collapse": r.collapse,
        "sa": r.report.sa,
        "ra": r.report.ra,
        "metrics": r.metrics,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn anneal_curve(alpha_min: f64, d_min: f64, d_max: f64, points: usize) -> Result<Vec<f64>, JsValue> {
    anneal_curve_impl(alpha_min, d_min, d_max, points).map_err(js_err)
}

#[wasm_bindgen]
pub fn gradient_split(theta_a: f64, theta_b: f64, alpha: f64) -> Result<Vec<f64>, JsValue> {
    gradient_split_impl(theta_a, theta_b, alpha).map_err(js_err)
}

#[wasm_bindgen]
pub fn toy_pretrain(kind: &str, alpha: f64, anneal: bool, epochs: usize, seed: u64) -> Result<String, JsValue> {
    toy_pretrain_impl(kind, alpha, anneal, epochs, seed).map_err(js_err)
}
