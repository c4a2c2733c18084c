use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Tensor};

/// Largest tolerated deviation from unit norm in [`pairwise_cosine`].
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// `S = Z·Zᵀ` for unit-norm rows.
pub fn pairwise_cosine(z: &Matrix) -> Result<Matrix> {
    for r in 0..z.rows() {
        let n = z.row_norm(r);
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Domain {
                op: "pairwise_cosine",
                msg: format!("row {r} has norm {n}"),
            });
        }
    }
    z.matmul_t(z)
}

/// Plain dot-product similarity `a·bᵀ` (`R×K`, `C×K` → `R×C`).
pub fn sim(g: &mut Graph, a: Tensor, b: Tensor) -> Result<Tensor> {
    g.matmul_t(a, b)
}

/// Asymmetric similarity between anchor rows `a` and candidate rows `b`.
///
/// The value is exactly `a·bᵀ` for every `alpha`. The anchor receives
/// `alpha` times the plain gradient and the candidate `1 − alpha` times,
/// built from two one-sided terms whose other argument is frozen:
/// `sg(S) + α·(a·sg(b)ᵀ − sg(S)) + (1−α)·(sg(a)·bᵀ − sg(S))`.
/// Both differences are exactly zero in value.
pub fn sim_alpha(g: &mut Graph, a: Tensor, b: Tensor, alpha: f64) -> Result<Tensor> {
    let s = g.matmul_t(a, b)?;
    let s_frozen = g.stop_gradient(s);
    let b_frozen = g.stop_gradient(b);
    let a_frozen = g.stop_gradient(a);
    let toward_b = g.matmul_t(a, b_frozen)?;
    let toward_a = g.matmul_t(a_frozen, b)?;
    let da = g.sub(toward_b, s_frozen)?;
    let db = g.sub(toward_a, s_frozen)?;
    let da = g.scale(da, alpha)?;
    let db = g.scale(db, 1.0 - alpha)?;
    let out = g.add(s_frozen, da)?;
    g.add(out, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        let eye = Matrix::identity(2);
        assert_eq!(pairwise_cosine(&eye).unwrap(), eye);
        let anti = Matrix::new(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert_eq!(pairwise_cosine(&anti).unwrap().get(0, 1), -1.0);
        let bad = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(pairwise_cosine(&bad).is_err());
    }

    fn split(alpha: f64) -> (f64, Matrix, Matrix) {
        let mut g = Graph::new();
        let zi = g.param(Matrix::row_vector(vec![0.6, 0.8]));
        let zj = g.param(Matrix::row_vector(vec![0.0, 1.0]));
        let s = sim_alpha(&mut g, zi, zj, alpha).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(s).item(), grads.get(zi), grads.get(zj))
    }

    #[test]
    fn value_is_independent_of_alpha() {
        let (v02, ..) = split(0.2);
        assert_eq!(v02, 0.8);
        for alpha in [0.0, 0.3, 0.5, 0.77, 1.0] {
            assert_eq!(split(alpha).0.to_bits(), v02.to_bits());
        }
    }

    #[test]
    fn gradients_split_by_alpha() {
        let (_, gi, gj) = split(0.3);
        assert!((gi.get(0, 0) - 0.0).abs() < 1e-15);
        assert!((gi.get(0, 1) - 0.3).abs() < 1e-15);
        assert!((gj.get(0, 0) - 0.42).abs() < 1e-15);
        assert!((gj.get(0, 1) - 0.56).abs() < 1e-15);

        let (_, hi, hj) = split(0.5);
        assert_eq!(hi.as_slice(), &[0.0, 0.5]);
        assert_eq!(hj.as_slice(), &[0.3, 0.4]);
    }
}
