//! Central finite-difference verification of reverse-mode gradients.
//!
//! The value function is replayed with stop-gradient nodes pinned to their
//! recorded values, so the numerical derivative measures exactly the paths
//! that `backward` differentiates. Leaves consumed only through
//! stop-gradient nodes are excluded from the comparison.

use crate::error::{Error, Result};

use super::graph::{Graph, Tensor};
use super::matrix::Matrix;

pub const DEFAULT_FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(1, |g_fd|)` over compared components.
    pub max_rel_err: f64,
    pub compared: usize,
    pub excluded_leaves: usize,
}

/// Checks the gradient of the scalar built by `f` with respect to `params`.
///
/// `f` receives a fresh graph and the leaf handles for `params` (in order)
/// and returns the scalar loss.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Tensor]) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let leaves: Vec<Tensor> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &leaves)?;
    let base = g.value(loss).item();
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("f(θ) = {base}")));
    }
    let grads = g.backward(loss)?;
    let live = g.live_params(loss);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        compared: 0,
        excluded_leaves: 0,
    };
    for (leaf, theta) in leaves.iter().zip(params) {
        if !live.contains(&leaf.id()) {
            report.excluded_leaves += 1;
            continue;
        }
        let analytic = grads.get(*leaf);
        let mut probe = theta.clone();
        for k in 0..theta.len() {
            let orig = probe.as_slice()[k];
            probe.as_mut_slice()[k] = orig + eps;
            let plus = eval_at(&g, loss, *leaf, &probe)?;
            probe.as_mut_slice()[k] = orig - eps;
            let minus = eval_at(&g, loss, *leaf, &probe)?;
            probe.as_mut_slice()[k] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (analytic.as_slice()[k] - fd).abs() / fd.abs().max(1.0);
            report.max_rel_err = report.max_rel_err.max(err);
            report.compared += 1;
        }
    }
    Ok(report)
}

fn eval_at(g: &Graph, loss: Tensor, leaf: Tensor, value: &Matrix) -> Result<f64> {
    let values = g.replay(&[(leaf, value)], true)?;
    let v = values[loss.id()].item();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!(
            "f evaluated to {v} while perturbing leaf {}",
            leaf.id()
        )))
    }
}
