use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Tensor};

use super::similarity::sim_alpha;

fn check_indices(op: &'static str, rows: usize, i: usize, j: usize, negs: &[usize]) -> Result<()> {
    if i >= rows || j >= rows || negs.iter().any(|&k| k >= rows) {
        return Err(Error::Domain {
            op,
            msg: format!("index out of range for {rows} views"),
        });
    }
    if j == i || negs.contains(&i) || negs.contains(&j) {
        return Err(Error::Domain {
            op,
            msg: format!("positive {j} must differ from the anchor {i} and the negatives"),
        });
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature must be > 0, got {t}")))
    }
}

/// Sum over anchors of the standard InfoNCE term, evaluated as a softmax
/// cross-entropy whose target is the positive column.
pub fn infonce_sum(
    g: &mut Graph,
    z: Tensor,
    anchors: &[usize],
    positives: &[usize],
    negatives: &[Vec<usize>],
    t: f64,
) -> Result<Tensor> {
    check_temperature(t)?;
    if anchors.is_empty() || anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::Domain {
            op: "infonce",
            msg: "every anchor needs exactly one positive".into(),
        });
    }
    for ((&i, &j), negs) in anchors.iter().zip(positives).zip(negatives) {
        check_indices("infonce", z.rows(), i, j, negs)?;
    }
    let za = g.select_rows(z, anchors)?;
    let s = g.matmul_t(za, z)?;
    let cols: Vec<Vec<usize>> = positives
        .iter()
        .zip(negatives)
        .map(|(&j, negs)| std::iter::once(j).chain(negs.iter().copied()).collect())
        .collect();
    let rows: Vec<usize> = (0..anchors.len()).collect();
    let picked = g.gather(s, &rows, &cols)?;
    let logits = g.scale(picked, 1.0 / t)?;
    let mean = g.softmax_cross_entropy(logits, &vec![0; anchors.len()])?;
    g.scale(mean, anchors.len() as f64)
}

/// `−log[e^{s_ij/t} / (e^{s_ij/t} + Σ_k e^{s_ik/t})]` for one anchor.
pub fn infonce(g: &mut Graph, z: Tensor, i: usize, j: usize, negs: &[usize], t: f64) -> Result<Tensor> {
    infonce_sum(g, z, &[i], &[j], &[negs.to_vec()], t)
}

/// Per-anchor asymmetric InfoNCE terms from a precomputed similarity block.
///
/// `sims` is `A×V` (row `a` holds anchor `a` against every view);
/// `lam_p` is `A×1` and `lam_n` is `A×N`. Returns `A×1` with entries
/// `log(λₚE_j + Σ_k λₙE_k) − log(λₚE_j)`, `E = exp(sim/t)`.
pub fn a_infonce_terms(
    g: &mut Graph,
    sims: Tensor,
    positives: &[usize],
    negatives: &[Vec<usize>],
    lam_p: &Matrix,
    lam_n: &Matrix,
    t: f64,
) -> Result<Tensor> {
    check_temperature(t)?;
    let a = sims.rows();
    if positives.len() != a || negatives.len() != a {
        return Err(Error::Shape {
            op: "a_infonce",
            lhs: sims.shape(),
            rhs: (positives.len(), negatives.len()),
        });
    }
    if lam_p.as_slice().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Domain {
            op: "a_infonce",
            msg: "positive weights must be > 0".into(),
        });
    }
    if lam_n.as_slice().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::Domain {
            op: "a_infonce",
            msg: "negative weights must be >= 0".into(),
        });
    }
    let rows: Vec<usize> = (0..a).collect();
    let pos_cols: Vec<Vec<usize>> = positives.iter().map(|&j| vec![j]).collect();
    let pos = g.gather(sims, &rows, &pos_cols)?;
    let neg = g.gather(sims, &rows, negatives)?;

    let pos = g.scale(pos, 1.0 / t)?;
    let pos = g.exp(pos)?;
    let lp = g.constant(lam_p.clone());
    let num = g.mul(lp, pos)?;

    let neg = g.scale(neg, 1.0 / t)?;
    let neg = g.exp(neg)?;
    let ln = g.constant(lam_n.clone());
    let neg = g.mul(ln, neg)?;
    let mass = g.sum_rows(neg)?;

    let denom = g.add(num, mass)?;
    let log_denom = g.log(denom)?;
    let log_num = g.log(num)?;
    g.sub(log_denom, log_num)
}

/// Asymmetric InfoNCE for one anchor `i` with positive `j`, uniform
/// negative weights given per negative.
#[allow(clippy::too_many_arguments)]
pub fn a_infonce(
    g: &mut Graph,
    z: Tensor,
    i: usize,
    j: usize,
    negs: &[usize],
    alpha: f64,
    lam_p: f64,
    lam_n: &[f64],
    t: f64,
) -> Result<Tensor> {
    check_indices("a_infonce", z.rows(), i, j, negs)?;
    if lam_n.len() != negs.len() {
        return Err(Error::Shape {
            op: "a_infonce",
            lhs: (1, negs.len()),
            rhs: (1, lam_n.len()),
        });
    }
    let zi = g.select_rows(z, &[i])?;
    let sims = sim_alpha(g, zi, z, alpha)?;
    let terms = a_infonce_terms(
        g,
        sims,
        &[j],
        &[negs.to_vec()],
        &Matrix::scalar(lam_p),
        &Matrix::row_vector(lam_n.to_vec()),
        t,
    )?;
    g.sum(terms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Graph, Tensor) {
        let mut g = Graph::new();
        let z = g.param(Matrix::new(3, 2, vec![1.0, 0.0, 1.0, 0.0, -1.0, 0.0]).unwrap());
        (g, z)
    }

    #[test]
    fn infonce_examples() {
        let (mut g, z) = toy();
        let l = infonce(&mut g, z, 0, 1, &[2], 1.0).unwrap();
        assert!((g.value(l).item() - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-12);
        assert!((g.value(l).item() - 0.126928).abs() < 1e-6);

        let l0 = infonce(&mut g, z, 0, 1, &[], 1.0).unwrap();
        assert!(g.value(l0).item().abs() < 1e-15);

        // Tie between the positive and the single negative.
        let l2 = infonce(&mut g, z, 1, 0, &[0], 1.0);
        assert!(l2.is_err());
        let mut g2 = Graph::new();
        let zt = g2.param(Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
        let tie = infonce(&mut g2, zt, 0, 1, &[2], 0.7).unwrap();
        assert!((g2.value(tie).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infonce_rejects_bad_indices() {
        let (mut g, z) = toy();
        assert!(infonce(&mut g, z, 0, 0, &[2], 1.0).is_err());
        assert!(infonce(&mut g, z, 0, 5, &[2], 1.0).is_err());
        assert!(infonce(&mut g, z, 0, 1, &[2], 0.0).is_err());
    }

    #[test]
    fn a_infonce_examples() {
        let (mut g, z) = toy();
        let l = a_infonce(&mut g, z, 0, 1, &[2], 0.3, 1.0, &[2.0], 1.0).unwrap();
        let expected = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 0.239545).abs() < 1e-6);

        let zero = a_infonce(&mut g, z, 0, 1, &[2], 0.3, 1.0, &[0.0], 1.0).unwrap();
        assert!(g.value(zero).item().abs() < 1e-15);

        assert!(a_infonce(&mut g, z, 0, 1, &[2], 0.3, 0.0, &[1.0], 1.0).is_err());
        assert!(a_infonce(&mut g, z, 0, 1, &[2], 0.3, 1.0, &[-1.0], 1.0).is_err());
    }
}
