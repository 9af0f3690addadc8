//! Shared orthonormal-basis utilities used by both SVD code paths. These
//! handle output conventions only; the singular-value computations in
//! `svd` and `oracle` stay independent.

use super::DenseMatrix;

/// Produce the next orthonormal column given the columns built so far.
/// `candidate`, when present, is orthogonalized (two modified Gram-Schmidt
/// passes); when absent or degenerate, the basis is completed from
/// coordinate vectors.
pub(super) fn complete_column(
    dim: usize,
    existing: &[Vec<f64>],
    candidate: Option<Vec<f64>>,
) -> Vec<f64> {
    if let Some(c) = candidate {
        if let Some(col) = orthogonalize(existing, c) {
            return col;
        }
    }
    for basis_idx in 0..dim {
        let mut e = vec![0.0; dim];
        e[basis_idx] = 1.0;
        if let Some(col) = orthogonalize(existing, e) {
            return col;
        }
    }
    unreachable!("cannot complete orthonormal basis beyond dimension");
}

fn orthogonalize(existing: &[Vec<f64>], mut v: Vec<f64>) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for col in existing {
            let dot: f64 = col.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (x, c) in v.iter_mut().zip(col) {
                *x -= dot * c;
            }
        }
    }
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return None;
    }
    for x in &mut v {
        *x /= norm;
    }
    Some(v)
}

/// Per column of `u`: make the entry of largest magnitude non-negative
/// (lowest index on ties), negating the matching `v` column to preserve
/// the product.
pub(super) fn fix_signs(u: &mut DenseMatrix, v: &mut DenseMatrix) {
    debug_assert_eq!(u.cols(), v.cols());
    for j in 0..u.cols() {
        let mut imax = 0;
        let mut best = u.get(0, j).abs();
        for i in 1..u.rows() {
            let a = u.get(i, j).abs();
            if a > best {
                best = a;
                imax = i;
            }
        }
        if u.get(imax, j) < 0.0 {
            for i in 0..u.rows() {
                let x = u.get(i, j);
                u.set(i, j, -x);
            }
            for i in 0..v.rows() {
                let x = v.get(i, j);
                v.set(i, j, -x);
            }
        }
    }
}
