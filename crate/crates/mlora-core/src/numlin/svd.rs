use crate::error::{Error, Result};

use super::DenseMatrix;

/// `(U, sigma, V)` with `sigma` non-increasing, orthonormal columns in `u`
/// and `v`, and `u * diag(sigma) * v^T` reconstructing the input.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    /// Count of singular values above `rel_tol * sigma[0]`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let tau = rel_tol * self.sigma.first().copied().unwrap_or(0.0);
        self.sigma.iter().filter(|&&s| s > tau).count()
    }
}

const CONVERGENCE_REL: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// One-sided Jacobi SVD. Sweeps plane rotations over column pairs until
/// every pair is orthogonal relative to its own column norms:
/// `|a_ij| <= 1e-12 * sqrt(a_ii * a_jj)`. The pairwise-relative criterion
/// keeps tiny singular values accurate relative to themselves, which the
/// rank gates downstream (sigma <= 1e-8 * sigma_1) depend on; a global
/// threshold would leave rank-deficient tails orders of magnitude too high
/// when the spectrum is spread.
///
/// Sign convention: in each column of `u` the entry of largest magnitude is
/// non-negative (lowest index on ties), making outputs reproducible.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Argument("svd: empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd: non-finite input".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        let r = svd_tall(&m.transpose())?;
        Ok(SvdResult {
            u: r.v,
            sigma: r.sigma,
            v: r.u,
        })
    }
}

fn svd_tall(m: &DenseMatrix) -> Result<SvdResult> {
    let rows = m.rows();
    let n = m.cols();
    // columns of the working copy converge to u_i * sigma_i
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v = DenseMatrix::identity(n);

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let mut aii = 0.0;
                let mut ajj = 0.0;
                let mut aij = 0.0;
                for k in 0..rows {
                    aii += cols[i][k] * cols[i][k];
                    ajj += cols[j][k] * cols[j][k];
                    aij += cols[i][k] * cols[j][k];
                }
                if aij == 0.0 || aij.abs() <= CONVERGENCE_REL * (aii * ajj).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..rows {
                    let xi = cols[i][k];
                    let xj = cols[j][k];
                    cols[i][k] = c * xi - s * xj;
                    cols[j][k] = s * xi + c * xj;
                }
                for k in 0..n {
                    let vi = v.get(k, i);
                    let vj = v.get(k, j);
                    v.set(k, i, c * vi - s * vj);
                    v.set(k, j, s * vi + c * vj);
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap());

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    // below this, a column's direction is numeric noise; rebuild it from
    // a basis completion instead of normalizing garbage
    let dir_tol = sigma_max * 1e-10;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (rank_pos, &j) in order.iter().enumerate() {
        let candidate = if sigma[rank_pos] > dir_tol && sigma[rank_pos] > 0.0 {
            let s = sigma[rank_pos];
            Some(cols[j].iter().map(|x| x / s).collect::<Vec<f64>>())
        } else {
            None
        };
        let col = super::ortho::complete_column(rows, &u_cols, candidate);
        u_cols.push(col);
    }

    let mut u = DenseMatrix::zeros(rows, n);
    for (jj, col) in u_cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u.set(i, jj, x);
        }
    }
    let mut v_sorted = DenseMatrix::zeros(n, n);
    for (jj, &j) in order.iter().enumerate() {
        for i in 0..n {
            v_sorted.set(i, jj, v.get(i, j));
        }
    }
    super::ortho::fix_signs(&mut u, &mut v_sorted);
    Ok(SvdResult {
        u,
        sigma,
        v: v_sorted,
    })
}

/// Count of singular values of `m` above `1e-8 * sigma_1`.
pub fn numerical_rank(m: &DenseMatrix) -> Result<usize> {
    Ok(svd(m)?.numerical_rank(1e-8))
}

#[cfg(test)]
mod tests {
    use super::super::{kaiming_uniform, matmul, svd_oracle, Rng};
    use super::*;
    use proptest::prelude::*;

    fn reconstruct(r: &SvdResult) -> DenseMatrix {
        let us = {
            let mut m = r.u.clone();
            for i in 0..m.rows() {
                for j in 0..m.cols() {
                    let v = m.get(i, j) * r.sigma[j];
                    m.set(i, j, v);
                }
            }
            m
        };
        matmul(&us, &r.v.transpose()).unwrap()
    }

    fn check_invariants(m: &DenseMatrix, r: &SvdResult) {
        let p = m.rows().min(m.cols());
        assert_eq!(r.sigma.len(), p);
        for w in r.sigma.windows(2) {
            assert!(w[0] >= w[1], "sigma not sorted: {:?}", r.sigma);
        }
        assert!(r.sigma.iter().all(|&s| s >= 0.0));
        for mat in [&r.u, &r.v] {
            let g = matmul(&mat.transpose(), mat).unwrap();
            let diff = g.max_abs_diff(&DenseMatrix::identity(p));
            assert!(diff < 1e-8, "orthonormality violated: {diff}");
        }
        let rec = reconstruct(r);
        let err = rec.sub(m).unwrap().frobenius_norm() / m.frobenius_norm().max(1e-300);
        assert!(err < 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn svd_identity() {
        let r = svd(&DenseMatrix::identity(4)).unwrap();
        for s in &r.sigma {
            assert!((s - 1.0).abs() < 1e-12);
        }
        check_invariants(&DenseMatrix::identity(4), &r);
    }

    #[test]
    fn svd_diagonal() {
        let m = DenseMatrix::diag(&[3.0, 2.0, 1.0]);
        let r = svd(&m).unwrap();
        assert!((r.sigma[0] - 3.0).abs() < 1e-12);
        assert!((r.sigma[1] - 2.0).abs() < 1e-12);
        assert!((r.sigma[2] - 1.0).abs() < 1e-12);
        check_invariants(&m, &r);
    }

    #[test]
    fn svd_matches_oracle_8x5() {
        let mut rng = Rng::new(17);
        let m = kaiming_uniform(&mut rng, 8, 5, 8).unwrap();
        let a = svd(&m).unwrap();
        let b = svd_oracle(&m).unwrap();
        for (x, y) in a.sigma.iter().zip(&b.sigma) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
        check_invariants(&m, &a);
    }

    #[test]
    fn svd_wide_matrix() {
        let mut rng = Rng::new(23);
        let m = kaiming_uniform(&mut rng, 3, 9, 3).unwrap();
        let r = svd(&m).unwrap();
        check_invariants(&m, &r);
    }

    #[test]
    fn svd_rank_deficient() {
        // rank-1 outer product embedded in 6x4
        let mut rng = Rng::new(31);
        let a = kaiming_uniform(&mut rng, 6, 1, 6).unwrap();
        let b = kaiming_uniform(&mut rng, 1, 4, 1).unwrap();
        let m = matmul(&a, &b).unwrap();
        let r = svd(&m).unwrap();
        check_invariants(&m, &r);
        assert_eq!(r.numerical_rank(1e-8), 1);
    }

    #[test]
    fn svd_rejects_empty() {
        assert!(svd(&DenseMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn svd_sign_convention_deterministic() {
        let mut rng = Rng::new(99);
        let m = kaiming_uniform(&mut rng, 7, 7, 7).unwrap();
        let a = svd(&m).unwrap();
        let b = svd(&m).unwrap();
        assert_eq!(a.u.data(), b.u.data());
        for j in 0..a.u.cols() {
            let col = a.u.column(j);
            let mut imax = 0;
            for (i, x) in col.iter().enumerate() {
                if x.abs() > col[imax].abs() {
                    imax = i;
                }
            }
            assert!(col[imax] >= 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn svd_agrees_with_oracle(seed in 0u64..10_000, rows in 1usize..16, cols in 1usize..16) {
            let mut rng = Rng::new(seed);
            let m = kaiming_uniform(&mut rng, rows, cols, rows.max(1)).unwrap();
            let a = svd(&m).unwrap();
            let b = svd_oracle(&m).unwrap();
            for (x, y) in a.sigma.iter().zip(&b.sigma) {
                prop_assert!((x - y).abs() < 1e-10);
            }
            prop_assert!(a.numerical_rank(1e-8) <= rows.min(cols));
        }
    }
}
