//! Spectral analysis of weight-update matrices: subspace-similarity grids,
//! singular-value histograms with cross-layer aggregation, and pairwise
//! sub-module comparison for MultiLoRA adapters.

use crate::adapters::MultiLoraAdapter;
use crate::error::{Error, Result};
use crate::numlin::{matmul, svd, DenseMatrix, SvdResult};

pub const DEFAULT_MAX_RANK: usize = 30;
pub const DEFAULT_BINS: usize = 40;
/// Histogram range over −log10(σ).
pub const HIST_LO: f64 = -2.0;
pub const HIST_HI: f64 = 8.0;
/// Relative zero threshold: σ ≤ 1e-8·σ₁ counts as a zero singular value.
pub const ZERO_REL_TOL: f64 = 1e-8;

/// φ values over subspace dimensions i, j ∈ [1, max_rank].
#[derive(Debug, Clone)]
pub struct SimilarityGrid {
    pub max_rank: usize,
    values: Vec<f64>,
    pub label_a: String,
    pub label_b: String,
    pub site: String,
}

impl SimilarityGrid {
    /// φ at 1-based subspace dimensions (i, j).
    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i >= 1 && i <= self.max_rank && j >= 1 && j <= self.max_rank);
        self.values[(i - 1) * self.max_rank + (j - 1)]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,phi\n");
        for i in 1..=self.max_rank {
            for j in 1..=self.max_rank {
                out.push_str(&format!("{i},{j},{}\n", fmt_sig(self.get(i, j), 12)));
            }
        }
        out
    }
}

/// Overlap of the top-i and top-j left singular subspaces:
/// φ = ‖U_iᵀU′_j‖_F² / min(i, j), in [0, 1].
pub fn subspace_similarity(dw_a: &DenseMatrix, dw_b: &DenseMatrix, i: usize, j: usize) -> Result<f64> {
    let ua = svd(dw_a)?.u;
    let ub = svd(dw_b)?.u;
    phi_from_u(&ua, &ub, i, j)
}

fn phi_from_u(ua: &DenseMatrix, ub: &DenseMatrix, i: usize, j: usize) -> Result<f64> {
    if i < 1 || i > ua.cols() || j < 1 || j > ub.cols() {
        return Err(Error::Argument(format!(
            "subspace_similarity: ranks ({i}, {j}) out of range ({}, {})",
            ua.cols(),
            ub.cols()
        )));
    }
    let gram = matmul(&ua.left_columns(i).transpose(), &ub.left_columns(j))?;
    Ok(gram.frobenius_norm().powi(2) / i.min(j) as f64)
}

/// Full φ grid over i, j ∈ [1, max_rank]. Decomposes each matrix once and
/// accumulates the squared Gram entries by prefix sums.
pub fn similarity_grid(dw_a: &DenseMatrix, dw_b: &DenseMatrix, max_rank: usize) -> Result<SimilarityGrid> {
    similarity_grid_labeled(dw_a, dw_b, max_rank, "a", "b", "")
}

pub fn similarity_grid_labeled(
    dw_a: &DenseMatrix,
    dw_b: &DenseMatrix,
    max_rank: usize,
    label_a: &str,
    label_b: &str,
    site: &str,
) -> Result<SimilarityGrid> {
    let ua = svd(dw_a)?.u;
    let ub = svd(dw_b)?.u;
    if max_rank < 1 || max_rank > ua.cols() || max_rank > ub.cols() {
        return Err(Error::Argument(format!(
            "similarity_grid: max_rank {max_rank} out of range ({}, {})",
            ua.cols(),
            ub.cols()
        )));
    }
    let gram = matmul(&ua.left_columns(max_rank).transpose(), &ub.left_columns(max_rank))?;
    // prefix[i][j] = Σ_{p<i, q<j} gram[p][q]²
    let mut prefix = vec![0.0f64; (max_rank + 1) * (max_rank + 1)];
    let w = max_rank + 1;
    for p in 0..max_rank {
        for q in 0..max_rank {
            let g = gram.get(p, q);
            prefix[(p + 1) * w + (q + 1)] =
                g * g + prefix[p * w + (q + 1)] + prefix[(p + 1) * w + q] - prefix[p * w + q];
        }
    }
    let mut values = Vec::with_capacity(max_rank * max_rank);
    for i in 1..=max_rank {
        for j in 1..=max_rank {
            values.push(prefix[i * w + j] / i.min(j) as f64);
        }
    }
    Ok(SimilarityGrid {
        max_rank,
        values,
        label_a: label_a.into(),
        label_b: label_b.into(),
        site: site.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    PerLayer,
    Mean,
}

/// Histogram of −log10(σ) with a distinguished zero bucket. Counts are
/// fractional only under mean aggregation.
#[derive(Debug, Clone)]
pub struct SpectrumHistogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<f64>,
    pub zero_count: f64,
    pub aggregation: Aggregation,
    pub matrices: usize,
}

impl SpectrumHistogram {
    pub fn total(&self) -> f64 {
        self.counts.iter().sum::<f64>() + self.zero_count
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                fmt_sig(self.bin_edges[k], 12),
                fmt_sig(self.bin_edges[k + 1], 12),
                fmt_sig(*c, 12)
            ));
        }
        out.push_str(&format!("zero_count,,{}\n", fmt_sig(self.zero_count, 12)));
        out
    }
}

/// Bin the singular values of each ΔW in the list (same site across
/// layers). σ ≤ 1e-8·σ₁ lands in the zero bucket; the rest are binned by
/// −log10(σ), clamped to the edge bins so the count identity stays exact.
pub fn sv_histogram(
    dw_list: &[DenseMatrix],
    bins: usize,
    agg: Aggregation,
) -> Result<Vec<SpectrumHistogram>> {
    if dw_list.is_empty() {
        return Err(Error::Argument("sv_histogram: empty matrix list".into()));
    }
    if bins == 0 {
        return Err(Error::Argument("sv_histogram: bins must be >= 1".into()));
    }
    let (rows, cols) = (dw_list[0].rows(), dw_list[0].cols());
    if dw_list.iter().any(|m| m.rows() != rows || m.cols() != cols) {
        return Err(Error::Argument("sv_histogram: matrices differ in shape".into()));
    }
    let width = (HIST_HI - HIST_LO) / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|k| HIST_LO + width * k as f64).collect();

    let mut per_layer = Vec::with_capacity(dw_list.len());
    for m in dw_list {
        let SvdResult { sigma, .. } = svd(m)?;
        let tau = ZERO_REL_TOL * sigma.first().copied().unwrap_or(0.0);
        let mut counts = vec![0.0f64; bins];
        let mut zero_count = 0.0f64;
        for &s in &sigma {
            if s <= tau {
                zero_count += 1.0;
            } else {
                let v = -s.log10();
                let k = (((v - HIST_LO) / width).floor() as isize).clamp(0, bins as isize - 1);
                counts[k as usize] += 1.0;
            }
        }
        per_layer.push(SpectrumHistogram {
            bin_edges: bin_edges.clone(),
            counts,
            zero_count,
            aggregation: Aggregation::PerLayer,
            matrices: 1,
        });
    }
    match agg {
        Aggregation::PerLayer => Ok(per_layer),
        Aggregation::Mean => {
            let n = per_layer.len() as f64;
            let mut counts = vec![0.0f64; bins];
            let mut zero_count = 0.0f64;
            for h in &per_layer {
                for (acc, c) in counts.iter_mut().zip(&h.counts) {
                    *acc += c / n;
                }
                zero_count += h.zero_count / n;
            }
            Ok(vec![SpectrumHistogram {
                bin_edges,
                counts,
                zero_count,
                aggregation: Aggregation::Mean,
                matrices: per_layer.len(),
            }])
        }
    }
}

/// Pairwise similarity grids between the materialized sub-deltas
/// `(A_i B_i) diag(scaling_i)` of a MultiLoRA adapter.
pub fn pairwise_sublora_grid(
    adapter: &MultiLoraAdapter,
    max_rank: usize,
) -> Result<Vec<Vec<SimilarityGrid>>> {
    let n = adapter.n();
    if n < 2 {
        return Err(Error::Argument(format!(
            "pairwise_sublora_grid: need n >= 2 sub-modules, got {n}"
        )));
    }
    let mut deltas = Vec::with_capacity(n);
    for i in 0..n {
        if adapter.scaling_list[i].data().iter().all(|&v| v == 0.0) {
            return Err(Error::Numeric(format!(
                "pairwise_sublora_grid: sub-module {i} has an all-zero scaling vector (degenerate ΔW)"
            )));
        }
        deltas.push(adapter.sub_delta(i)?);
    }
    let mut grids = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = Vec::with_capacity(n);
        for j in 0..n {
            row.push(similarity_grid_labeled(
                &deltas[i],
                &deltas[j],
                max_rank,
                &format!("sub{i}"),
                &format!("sub{j}"),
                "",
            )?);
        }
        grids.push(row);
    }
    Ok(grids)
}

/// Plain-decimal formatting with `sig` significant digits.
pub fn fmt_sig(v: f64, sig: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i64;
    let decimals = (sig as i64 - 1 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlin::{svd_oracle, Rng};

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> DenseMatrix {
        let data = (0..rows * cols).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identical_matrices_phi_one() {
        let mut rng = Rng::new(11);
        let m = random_matrix(&mut rng, 12, 9);
        for i in 1..=9 {
            let phi = subspace_similarity(&m, &m, i, i).unwrap();
            assert!((phi - 1.0).abs() < 1e-9, "phi({i},{i}) = {phi}");
        }
    }

    #[test]
    fn orthogonal_rank_one_phi_zero() {
        // e1 e1ᵀ vs e2 e2ᵀ: disjoint singular directions
        let mut a = DenseMatrix::zeros(4, 4);
        a.set(0, 0, 1.0);
        let mut b = DenseMatrix::zeros(4, 4);
        b.set(1, 1, 1.0);
        assert_eq!(subspace_similarity(&a, &b, 1, 1).unwrap(), 0.0);
    }

    #[test]
    fn phi_matches_oracle_pipeline() {
        let mut rng = Rng::new(23);
        let a = random_matrix(&mut rng, 10, 8);
        let b = random_matrix(&mut rng, 10, 8);
        let phi = subspace_similarity(&a, &b, 3, 5).unwrap();
        let ua = svd_oracle(&a).unwrap().u;
        let ub = svd_oracle(&b).unwrap().u;
        let gram = matmul(&ua.left_columns(3).transpose(), &ub.left_columns(5)).unwrap();
        let want = gram.frobenius_norm().powi(2) / 3.0;
        assert!((phi - want).abs() < 1e-8, "phi {phi} vs oracle {want}");
    }

    #[test]
    fn rank_out_of_range_rejected() {
        let m = DenseMatrix::identity(4);
        assert!(subspace_similarity(&m, &m, 0, 1).is_err());
        assert!(subspace_similarity(&m, &m, 5, 1).is_err());
        assert!(similarity_grid(&m, &m, 5).is_err());
    }

    #[test]
    fn grid_diagonal_bounds_and_symmetry() {
        let mut rng = Rng::new(37);
        let a = random_matrix(&mut rng, 16, 12);
        let b = random_matrix(&mut rng, 16, 12);
        let self_grid = similarity_grid(&a, &a, 10).unwrap();
        let ab = similarity_grid(&a, &b, 10).unwrap();
        let ba = similarity_grid(&b, &a, 10).unwrap();
        for i in 1..=10 {
            assert!((self_grid.get(i, i) - 1.0).abs() < 1e-9);
            assert!((ab.get(i, i) - ba.get(i, i)).abs() < 1e-10);
            for j in 1..=10 {
                let v = ab.get(i, j);
                assert!(v >= -1e-9 && v <= 1.0 + 1e-9, "phi({i},{j}) = {v}");
            }
        }
    }

    #[test]
    fn grid_agrees_with_direct_phi() {
        let mut rng = Rng::new(41);
        let a = random_matrix(&mut rng, 9, 7);
        let b = random_matrix(&mut rng, 9, 7);
        let grid = similarity_grid(&a, &b, 6).unwrap();
        for &(i, j) in &[(1, 1), (2, 5), (6, 3), (4, 4)] {
            let direct = subspace_similarity(&a, &b, i, j).unwrap();
            assert!((grid.get(i, j) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn histogram_analytic_spectrum() {
        let m = DenseMatrix::diag(&[10.0, 1.0, 0.1]);
        let hists = sv_histogram(&[m], DEFAULT_BINS, Aggregation::PerLayer).unwrap();
        let h = &hists[0];
        assert_eq!(h.zero_count, 0.0);
        assert_eq!(h.total(), 3.0);
        // −log10 values −1, 0, 1 over [−2, 8] with width 0.25
        for v in [-1.0f64, 0.0, 1.0] {
            let k = ((v - HIST_LO) / 0.25).floor() as usize;
            assert_eq!(h.counts[k], 1.0, "missing count near −log10 σ = {v}");
        }
    }

    #[test]
    fn low_rank_delta_zero_count() {
        // rank-4 ΔW in a 20×16 site: at least 16−4 zero singular values
        let mut rng = Rng::new(53);
        let a = random_matrix(&mut rng, 20, 4);
        let b = random_matrix(&mut rng, 4, 16);
        let dw = matmul(&a, &b).unwrap();
        let h = &sv_histogram(&[dw], DEFAULT_BINS, Aggregation::PerLayer).unwrap()[0];
        assert!(h.zero_count >= 12.0, "zero_count {}", h.zero_count);
        assert_eq!(h.total(), 16.0);
    }

    #[test]
    fn mean_of_identical_equals_single() {
        let mut rng = Rng::new(59);
        let m = random_matrix(&mut rng, 8, 8);
        let single = &sv_histogram(&[m.clone()], DEFAULT_BINS, Aggregation::PerLayer).unwrap()[0];
        let mean =
            &sv_histogram(&[m.clone(), m], DEFAULT_BINS, Aggregation::Mean).unwrap()[0];
        assert_eq!(mean.counts, single.counts);
        assert_eq!(mean.zero_count, single.zero_count);
        assert_eq!(mean.matrices, 2);
    }

    #[test]
    fn histogram_conservation_per_layer() {
        let mut rng = Rng::new(61);
        let list: Vec<DenseMatrix> = (0..3).map(|_| random_matrix(&mut rng, 10, 7)).collect();
        for h in sv_histogram(&list, DEFAULT_BINS, Aggregation::PerLayer).unwrap() {
            assert_eq!(h.total(), 7.0);
        }
        let mean = &sv_histogram(&list, DEFAULT_BINS, Aggregation::Mean).unwrap()[0];
        assert!((mean.total() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_rejects_bad_input() {
        let a = DenseMatrix::zeros(3, 3);
        let b = DenseMatrix::zeros(4, 3);
        assert!(sv_histogram(&[], DEFAULT_BINS, Aggregation::Mean).is_err());
        assert!(sv_histogram(&[a.clone(), b], DEFAULT_BINS, Aggregation::Mean).is_err());
        assert!(sv_histogram(&[a], 0, Aggregation::Mean).is_err());
    }

    fn toy_multilora(rng: &mut Rng, n: usize, zero_scaling: Option<usize>) -> MultiLoraAdapter {
        let (d_in, d_out, r) = (12, 10, 2);
        let mut a_list = Vec::new();
        let mut b_list = Vec::new();
        let mut s_list = Vec::new();
        for i in 0..n {
            a_list.push(random_matrix(rng, d_in, r));
            b_list.push(random_matrix(rng, r, d_out));
            s_list.push(if zero_scaling == Some(i) {
                DenseMatrix::zeros(1, d_out)
            } else {
                random_matrix(rng, 1, d_out)
            });
        }
        MultiLoraAdapter::new(a_list, b_list, s_list).unwrap()
    }

    #[test]
    fn pairwise_grids_diagonal_and_symmetry() {
        let mut rng = Rng::new(67);
        let adapter = toy_multilora(&mut rng, 3, None);
        let grids = pairwise_sublora_grid(&adapter, 5).unwrap();
        assert_eq!(grids.len(), 3);
        for i in 0..3 {
            for k in 1..=5 {
                assert!((grids[i][i].get(k, k) - 1.0).abs() < 1e-9);
                for j in 0..3 {
                    assert!((grids[i][j].get(k, k) - grids[j][i].get(k, k)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn pairwise_matches_oracle_recomputation() {
        let mut rng = Rng::new(71);
        let adapter = toy_multilora(&mut rng, 3, None);
        let grids = pairwise_sublora_grid(&adapter, 4).unwrap();
        let d0 = adapter.sub_delta(0).unwrap();
        let d2 = adapter.sub_delta(2).unwrap();
        let u0 = svd_oracle(&d0).unwrap().u;
        let u2 = svd_oracle(&d2).unwrap().u;
        for (i, j) in [(1usize, 1usize), (2, 4), (4, 3)] {
            let gram = matmul(&u0.left_columns(i).transpose(), &u2.left_columns(j)).unwrap();
            let want = gram.frobenius_norm().powi(2) / i.min(j) as f64;
            let got = grids[0][2].get(i, j);
            assert!((got - want).abs() < 1e-8, "({i},{j}): {got} vs {want}");
        }
    }

    #[test]
    fn pairwise_degenerate_and_small_n_rejected() {
        let mut rng = Rng::new(73);
        let degenerate = toy_multilora(&mut rng, 3, Some(1));
        assert!(matches!(
            pairwise_sublora_grid(&degenerate, 4),
            Err(Error::Numeric(_))
        ));
        let single = toy_multilora(&mut rng, 1, None);
        assert!(pairwise_sublora_grid(&single, 4).is_err());
    }

    #[test]
    fn csv_formats() {
        let mut rng = Rng::new(79);
        let a = random_matrix(&mut rng, 8, 8);
        let grid = similarity_grid(&a, &a, 3).unwrap();
        let csv = grid.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "i,j,phi");
        assert_eq!(lines.len(), 1 + 9);
        assert!(lines[1].starts_with("1,1,"));

        let h = &sv_histogram(&[a], DEFAULT_BINS, Aggregation::Mean).unwrap()[0];
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,count");
        assert_eq!(lines.len(), 1 + DEFAULT_BINS + 1);
        assert!(lines.last().unwrap().starts_with("zero_count,,"));
    }

    #[test]
    fn fmt_sig_plain_decimal() {
        assert_eq!(fmt_sig(0.0, 12), "0");
        assert_eq!(fmt_sig(1.0, 3), "1.00");
        assert_eq!(fmt_sig(0.25, 3), "0.250");
        assert!(!fmt_sig(1.23e-7, 12).contains('e'));
    }
}
