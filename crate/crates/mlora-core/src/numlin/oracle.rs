//! Independent SVD check: singular values as square roots of the
//! eigenvalues of the Gram matrix, via cyclic two-sided Jacobi
//! eigendecomposition. Deliberately a separate algorithm from
//! the one-sided Jacobi in `svd`.

use crate::error::{Error, Result};

use super::{matmul, DenseMatrix, SvdResult};

const ORACLE_DIM_CAP: usize = 64;

/// Oracle SVD for matrices with min(rows, cols) <= 64.
pub fn svd_oracle(m: &DenseMatrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Argument("svd_oracle: empty matrix".into()));
    }
    if m.rows().min(m.cols()) > ORACLE_DIM_CAP {
        return Err(Error::Argument(format!(
            "svd_oracle: min dimension {} exceeds cap {}",
            m.rows().min(m.cols()),
            ORACLE_DIM_CAP
        )));
    }
    let tall = m.rows() >= m.cols();
    // eigendecompose the Gram matrix on the smaller side
    let gram = if tall {
        matmul(&m.transpose(), m)?
    } else {
        matmul(m, &m.transpose())?
    };
    let (eigvals, eigvecs) = jacobi_eigh(&gram)?;

    let p = gram.rows();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap());
    let sigma: Vec<f64> = order.iter().map(|&i| eigvals[i].max(0.0).sqrt()).collect();

    let mut small = DenseMatrix::zeros(p, p);
    for (jj, &j) in order.iter().enumerate() {
        for i in 0..p {
            small.set(i, jj, eigvecs.get(i, j));
        }
    }
    // recover the other factor column by column: m v_i / sigma_i
    let long_dim = m.rows().max(m.cols());
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let dir_tol = sigma_max * 1e-10;
    let mapped = if tall { matmul(m, &small)? } else { matmul(&m.transpose(), &small)? };
    let mut long_cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    for j in 0..p {
        let candidate = if sigma[j] > dir_tol && sigma[j] > 0.0 {
            Some(mapped.column(j).iter().map(|x| x / sigma[j]).collect())
        } else {
            None
        };
        long_cols.push(super::ortho::complete_column(long_dim, &long_cols, candidate));
    }
    let mut long = DenseMatrix::zeros(long_dim, p);
    for (j, col) in long_cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            long.set(i, j, x);
        }
    }

    let (mut u, mut v) = if tall { (long, small) } else { (small, long) };
    super::ortho::fix_signs(&mut u, &mut v);
    Ok(SvdResult { u, sigma, v })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// unsorted eigenvalues and the matrix of eigenvector columns.
pub fn jacobi_eigh(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    if a.rows() != a.cols() {
        return Err(Error::Shape("jacobi_eigh: matrix not square".into()));
    }
    let n = a.rows();
    let mut w = a.clone();
    let mut vecs = DenseMatrix::identity(n);
    let tol = 1e-14 * a.frobenius_norm().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut max_off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                max_off = max_off.max(apq.abs());
                if apq.abs() <= tol {
                    continue;
                }
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..n {
                    let wkp = w.get(k, p);
                    let wkq = w.get(k, q);
                    w.set(k, p, c * wkp - s * wkq);
                    w.set(k, q, s * wkp + c * wkq);
                }
                for k in 0..n {
                    let wpk = w.get(p, k);
                    let wqk = w.get(q, k);
                    w.set(p, k, c * wpk - s * wqk);
                    w.set(q, k, s * wpk + c * wqk);
                }
                for k in 0..n {
                    let vkp = vecs.get(k, p);
                    let vkq = vecs.get(k, q);
                    vecs.set(k, p, c * vkp - s * vkq);
                    vecs.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        if max_off <= tol {
            break;
        }
    }
    let eigvals = (0..n).map(|i| w.get(i, i)).collect();
    Ok((eigvals, vecs))
}
