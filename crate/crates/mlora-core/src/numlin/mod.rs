//! Dense linear algebra: row-major matrices, seeded PRNG, Kaiming-Uniform
//! sampling, matrix multiply, one-sided Jacobi SVD and an independent
//! Gram-eigendecomposition SVD oracle.

mod matrix;
mod oracle;
mod ortho;
mod rng;
mod svd;

pub use matrix::{DenseMatrix, Precision};
pub use oracle::{jacobi_eigh, svd_oracle};
pub use rng::{kaiming_uniform, Rng};
pub use svd::{numerical_rank, svd, SvdResult};

use crate::error::{Error, Result};

/// Standard matrix product `a * b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul: {}x{} * {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data()[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data()[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    DenseMatrix::from_vec(m, n, out)
}
