//! L∞ projected gradient ascent on inputs.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::ContrastiveBatch;
use crate::encoder::{Classifier, MlpEncoder};
use crate::error::{Error, Result};
use crate::losses::{batch_loss, LossConfig, SimMode};
use crate::rng::Rng;
use crate::tensor::{Graph, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub input_range: [f64; 2],
}

impl AttackConfig {
    /// Inner maximization during pretraining.
    pub fn pretrain_default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: 0.025,
            steps: 5,
            random_start: true,
            input_range: [0.0, 1.0],
        }
    }

    /// PGD-20 used for robust accuracy and adversarial finetuning.
    pub fn eval_default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: 0.01,
            steps: 20,
            random_start: true,
            input_range: [0.0, 1.0],
        }
    }

    /// `epsilon = 0` is accepted and turns every attack into the identity.
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.input_range;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("attack.epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0) || self.steps == 0 {
            return Err(Error::config("attack.step_size must be > 0 and attack.steps >= 1"));
        }
        if !(lo < hi) {
            return Err(Error::config(format!("attack.input_range [{lo}, {hi}] is empty")));
        }
        Ok(())
    }
}

/// Objective value(s) and input gradient at one iterate. A single value
/// tracks the best iterate for the whole batch; one value per row tracks
/// each row separately.
pub struct Probe {
    pub values: Vec<f64>,
    pub grad: Matrix,
}

#[derive(Clone, Debug)]
pub struct PgdOutcome {
    pub x_adv: Matrix,
    /// Objective at the starting point (after the random start, if any).
    pub initial: f64,
    /// Objective at the returned point.
    pub best: f64,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Moves `v` into `[center − eps, center + eps] ∩ [lo, hi]` such that the
/// difference `v − center`, as computed in floating point, also lies in
/// `[−eps, eps]`.
fn project(v: f64, center: f64, eps: f64, lo: f64, hi: f64) -> f64 {
    let mut v = v.clamp(center - eps, center + eps).clamp(lo, hi);
    while v - center > eps {
        v = v.next_down();
    }
    while center - v > eps {
        v = v.next_up();
    }
    v
}

fn check_iterate(x: &Matrix, x0: &Matrix, cfg: &AttackConfig) -> Result<()> {
    let [lo, hi] = cfg.input_range;
    for (&v, &c) in x.as_slice().iter().zip(x0.as_slice()) {
        if (v - c).abs() > cfg.epsilon || v < lo || v > hi {
            return Err(Error::Domain {
                op: "pgd",
                msg: format!("iterate {v} escapes the ε-ball around {c} or the input range"),
            });
        }
    }
    Ok(())
}

fn total(values: &[f64]) -> f64 {
    values.iter().sum()
}

/// `x ← Π(x + step·sign(∇))` for `cfg.steps` iterations starting at `x0`
/// (optionally from a uniform random point in the ε-ball). Returns the best
/// iterate seen, so the objective never ends below its starting value.
pub fn pgd<F>(x0: &Matrix, cfg: &AttackConfig, rng: &mut Rng, mut objective: F) -> Result<PgdOutcome>
where
    F: FnMut(&Matrix) -> Result<Probe>,
{
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        let probe = objective(x0)?;
        let v = total(&probe.values);
        return Ok(PgdOutcome {
            x_adv: x0.clone(),
            initial: v,
            best: v,
        });
    }
    let [lo, hi] = cfg.input_range;
    let eps = cfg.epsilon;
    let mut x = x0.clone();
    if cfg.random_start {
        for (v, &c) in x.as_mut_slice().iter_mut().zip(x0.as_slice()) {
            let u: f64 = rng.random_range(-eps..=eps);
            *v = project(c + u, c, eps, lo, hi);
        }
    }
    check_iterate(&x, x0, cfg)?;

    let mut best_x = x.clone();
    let mut best_vals: Vec<f64> = Vec::new();
    let mut initial = 0.0;
    for step in 0..=cfg.steps {
        let probe = objective(&x)?;
        if probe.values.iter().any(|v| !v.is_finite()) || !probe.grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "pgd step {step}: objective {:?}, gradient max |g| = {}",
                total(&probe.values),
                probe.grad.max_abs()
            )));
        }
        if probe.grad.shape() != x.shape() {
            return Err(Error::Shape {
                op: "pgd",
                lhs: probe.grad.shape(),
                rhs: x.shape(),
            });
        }
        let per_row = probe.values.len() == x.rows() && x.rows() > 1;
        if step == 0 {
            initial = total(&probe.values);
            best_vals = probe.values.clone();
        } else if per_row {
            for (r, (&v, b)) in probe.values.iter().zip(best_vals.iter_mut()).enumerate() {
                if v > *b {
                    *b = v;
                    best_x.row_mut(r).copy_from_slice(x.row(r));
                }
            }
        } else if total(&probe.values) > total(&best_vals) {
            best_vals = probe.values.clone();
            best_x = x.clone();
        }
        if step == cfg.steps {
            break;
        }
        for (k, v) in x.as_mut_slice().iter_mut().enumerate() {
            let c = x0.as_slice()[k];
            let g = probe.grad.as_slice()[k];
            *v = project(*v + cfg.step_size * sign(g), c, eps, lo, hi);
        }
        check_iterate(&x, x0, cfg)?;
    }
    Ok(PgdOutcome {
        x_adv: best_x,
        initial,
        best: total(&best_vals),
    })
}

/// Instance-wise attack on the contrastive loss. The adversarial view
/// starts at the original inputs; clean embeddings and encoder weights are
/// held fixed. Similarities use plain gradients so that α only changes
/// how the encoder, not the attacker, is updated.
pub fn pgd_contrastive(
    encoder: &MlpEncoder,
    batch: &ContrastiveBatch,
    loss: &LossConfig,
    alpha: f64,
    cfg: &AttackConfig,
    rng: &mut Rng,
) -> Result<PgdOutcome> {
    let (_, z_clean) = encoder.encode(&batch.clean())?;
    pgd(&batch.original, cfg, rng, |x| {
        let mut g = Graph::new();
        let vars = encoder.bind(&mut g, false);
        let clean = g.constant(z_clean.clone());
        let input = g.param(x.clone());
        let adv = encoder.forward(&mut g, &vars, input)?;
        let z = g.concat_rows(&[clean, adv.z])?;
        let parts = batch_loss(&mut g, z, &batch.layout, loss, alpha, SimMode::Symmetric)?;
        let grads = g.backward(parts.total)?;
        Ok(Probe {
            values: vec![g.value(parts.total).item()],
            grad: grads.get(input),
        })
    })
}

/// Per-row cross-entropy and its input gradient for a fixed classifier.
pub fn cross_entropy_probe(model: &Classifier, x: &Matrix, labels: &[usize]) -> Result<Probe> {
    let mut g = Graph::new();
    let vars = model.encoder.bind(&mut g, false);
    let head = model.head.bind(&mut g, false);
    let input = g.param(x.clone());
    let enc = model.encoder.forward(&mut g, &vars, input)?;
    let logits = head.forward(&mut g, enc.h)?;
    let mean = g.softmax_cross_entropy(logits, labels)?;
    let grads = g.backward(mean)?;
    let lv = g.value(logits);
    let values = (0..lv.rows())
        .map(|r| {
            let row = lv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[labels[r]]
        })
        .collect();
    Ok(Probe {
        values,
        grad: grads.get(input),
    })
}

/// Label-based attack maximizing cross-entropy, tracking the best iterate
/// per row.
pub fn pgd_supervised(model: &Classifier, x: &Matrix, labels: &[usize], cfg: &AttackConfig, rng: &mut Rng) -> Result<Matrix> {
    if labels.len() != x.rows() {
        return Err(Error::Shape {
            op: "pgd_supervised",
            lhs: x.shape(),
            rhs: (labels.len(), 1),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= model.head.classes()) {
        return Err(Error::config(format!("label {l} outside 0..{}", model.head.classes())));
    }
    Ok(pgd(x, cfg, rng, |xa| cross_entropy_probe(model, xa, labels))?.x_adv)
}
