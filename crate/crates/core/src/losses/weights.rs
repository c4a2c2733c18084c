//! Pair weights and the positive-unlabeled debiased negative mass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    /// `w = exp(sim / t)`
    Similarity,
}

/// Importance weights for similarity entries. Returned as plain values:
/// they enter the loss as constants.
pub fn pair_weights(sims: &Matrix, t: f64, mode: WeightMode) -> Matrix {
    match mode {
        WeightMode::Uniform => Matrix::filled(sims.rows(), sims.cols(), 1.0),
        WeightMode::Similarity => sims.map(|s| (s / t).exp()),
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau) {
        return Err(Error::config(format!("class prior tau must lie in [0, 1), got {tau}")));
    }
    Ok(())
}

/// Positive-pair factor `(M − (M+N)τ) / (M(1 − τ))` of the hard-negative
/// objective. Negative whenever `τ > M / (M + N)`.
pub fn lambda_pos_coeff(m: usize, n: usize, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if m == 0 {
        return Err(Error::config("lambda_pos_coeff: M must be >= 1"));
    }
    let (m, n) = (m as f64, n as f64);
    Ok((m - (m + n) * tau) / (m * (1.0 - tau)))
}

/// Lower bound `N·e^{−1/t}` applied to the debiased mass.
pub fn negative_mass_floor(n: usize, t: f64) -> f64 {
    n as f64 * (-1.0 / t).exp()
}

/// Per-row estimate of the true-negative mass:
/// `max((Σ_k wₙ·e^{s_k/t} − (N/M)·τ·Σ_j wₚ·e^{s_j/t}) / (1 − τ), N·e^{−1/t})`.
///
/// `neg_sims` is `R×N`, `pos_sims` is `R×M`; the weights have matching
/// shapes and are treated as constants. Returns `R×1`.
pub fn debiased_negative_mass(
    g: &mut Graph,
    neg_sims: Tensor,
    pos_sims: Tensor,
    w_neg: &Matrix,
    w_pos: &Matrix,
    tau: f64,
    t: f64,
) -> Result<Tensor> {
    check_tau(tau)?;
    let (rows, n) = neg_sims.shape();
    let m = pos_sims.cols();
    if pos_sims.rows() != rows {
        return Err(Error::Shape {
            op: "debiased_negative_mass",
            lhs: neg_sims.shape(),
            rhs: pos_sims.shape(),
        });
    }
    if w_neg.shape() != neg_sims.shape() || w_pos.shape() != pos_sims.shape() {
        return Err(Error::Shape {
            op: "debiased_negative_mass",
            lhs: w_neg.shape(),
            rhs: w_pos.shape(),
        });
    }
    if m == 0 && tau > 0.0 {
        return Err(Error::config(
            "debiased_negative_mass: at least one positive is required when tau > 0",
        ));
    }
    let weighted_sum = |g: &mut Graph, s: Tensor, w: &Matrix| -> Result<Tensor> {
        let scaled = g.scale(s, 1.0 / t)?;
        let e = g.exp(scaled)?;
        let w = g.constant(w.clone());
        let we = g.mul(w, e)?;
        g.sum_rows(we)
    };
    let neg = weighted_sum(g, neg_sims, w_neg)?;
    let raw = if tau > 0.0 {
        let pos = weighted_sum(g, pos_sims, w_pos)?;
        let pos = g.scale(pos, n as f64 / m as f64 * tau)?;
        let diff = g.sub(neg, pos)?;
        g.scale(diff, 1.0 / (1.0 - tau))?
    } else {
        neg
    };
    g.clamp_min(raw, negative_mass_floor(n, t))
}
