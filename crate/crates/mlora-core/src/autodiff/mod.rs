//! Reverse-mode gradients over a recorded computation tape, plus the AdamW
//! optimizer, linear warmup/decay schedule and a finite-difference
//! gradient checker.

mod check;
mod optim;
mod params;

pub use check::grad_check;
pub use optim::{adamw_step, AdamWConfig, OptimState, Schedule};
pub use params::{Param, ParamId, Params};

use crate::error::{Error, Result};
use crate::numlin::{matmul, DenseMatrix};

pub type NodeId = usize;

/// Additive pre-softmax mask value standing in for -inf. Large enough that
/// exp underflows to exactly zero after max subtraction, keeping causality
/// exact while all stored values stay finite.
pub const MASK_NEG: f64 = -1e30;

const RMS_EPS: f64 = 1e-6;

enum Op {
    Leaf(Option<ParamId>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    /// `a: s x k` times a `1 x k` vector broadcast over rows.
    RowBroadcastMul(NodeId, NodeId),
    Silu(NodeId),
    /// RMS normalization of `x: s x d` with a `1 x d` gain.
    RmsNorm(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    AddConst(NodeId),
    SoftmaxRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    Sum(NodeId),
    /// Mean next-token cross-entropy over masked rows of the logits node.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Forward recording of the computation graph. One tape per forward pass;
/// single-owner during a training step.
pub struct Tape {
    nodes: Vec<Node>,
    cache_log: Vec<(String, Vec<NodeId>)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            cache_log: Vec::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id].value
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Leaf(None))
    }

    pub fn param(&mut self, params: &Params, id: ParamId) -> NodeId {
        self.push(params.value(id).clone(), Op::Leaf(Some(id)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Hadamard(a, b)))
    }

    /// Multiply each row of `a` elementwise by the `1 x k` vector `vec`.
    pub fn row_broadcast_mul(&mut self, a: NodeId, vec: NodeId) -> Result<NodeId> {
        let (am, vm) = (self.value(a), self.value(vec));
        if vm.rows() != 1 || vm.cols() != am.cols() {
            return Err(Error::Shape(format!(
                "row_broadcast_mul: {}x{} with {}x{}",
                am.rows(),
                am.cols(),
                vm.rows(),
                vm.cols()
            )));
        }
        let mut out = am.clone();
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let x = out.get(i, j) * vm.get(0, j);
                out.set(i, j, x);
            }
        }
        Ok(self.push(out, Op::RowBroadcastMul(a, vec)))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Gain-only RMS normalization, applied per row.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (xm, gm) = (self.value(x), self.value(gain));
        if gm.rows() != 1 || gm.cols() != xm.cols() {
            return Err(Error::Shape("rms_norm: gain shape mismatch".into()));
        }
        let d = xm.cols();
        let mut out = DenseMatrix::zeros(xm.rows(), d);
        for i in 0..xm.rows() {
            let r = row_rms(xm.row(i));
            for j in 0..d {
                out.set(i, j, xm.get(i, j) / r * gm.get(0, j));
            }
        }
        Ok(self.push(out, Op::RmsNorm(x, gain)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let am = self.value(a);
        if start + len > am.cols() {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {}) out of {} columns",
                start + len,
                am.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(am.rows(), len);
        for i in 0..am.rows() {
            for j in 0..len {
                out.set(i, j, am.get(i, start + j));
            }
        }
        Ok(self.push(out, Op::SliceCols(a, start, len)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_cols: empty".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = DenseMatrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pm = self.value(p);
            if pm.rows() != rows {
                return Err(Error::Shape("concat_cols: row mismatch".into()));
            }
            for i in 0..rows {
                for j in 0..pm.cols() {
                    out.set(i, off + j, pm.get(i, j));
                }
            }
            off += pm.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Add a constant matrix (no gradient through the constant).
    pub fn add_const(&mut self, a: NodeId, c: &DenseMatrix) -> Result<NodeId> {
        let v = self.value(a).add(c)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    /// Numerically stable softmax over each row.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let am = self.value(a);
        let mut out = DenseMatrix::zeros(am.rows(), am.cols());
        for i in 0..am.rows() {
            let row = am.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut denom = 0.0;
            for &x in row {
                denom += (x - max).exp();
            }
            for j in 0..am.cols() {
                out.set(i, j, (am.get(i, j) - max).exp() / denom);
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row lookup: `out[s, :] = table[ids[s], :]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tm = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= tm.rows()) {
            return Err(Error::Argument(format!(
                "gather_rows: index {bad} out of {} rows",
                tm.rows()
            )));
        }
        let mut out = DenseMatrix::zeros(ids.len(), tm.cols());
        for (s, &i) in ids.iter().enumerate() {
            for j in 0..tm.cols() {
                out.set(s, j, tm.get(i, j));
            }
        }
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec())))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let v = DenseMatrix::from_vec(1, 1, vec![total]).expect("scalar");
        self.push(v, Op::Sum(a))
    }

    /// Mean cross-entropy of `logits[s, :]` against `targets[s]` over rows
    /// where `mask[s]` is set.
    pub fn cross_entropy_masked(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let lm = self.value(logits);
        if targets.len() != lm.rows() || mask.len() != lm.rows() {
            return Err(Error::Shape("cross_entropy: row count mismatch".into()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Argument("cross_entropy: empty loss mask".into()));
        }
        if let Some(&bad) = targets
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
            .find(|&&t| t >= lm.cols())
        {
            return Err(Error::Argument(format!(
                "cross_entropy: target id {bad} out of vocab {}",
                lm.cols()
            )));
        }
        let mut total = 0.0;
        for s in 0..lm.rows() {
            if !mask[s] {
                continue;
            }
            total += row_logsumexp(lm.row(s)) - lm.get(s, targets[s]);
        }
        let v = DenseMatrix::from_vec(1, 1, vec![total / count as f64])?;
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    /// Record intermediate nodes a site caches for its backward pass; the
    /// bench counters read actual tensor shapes from here.
    pub fn log_site_cache(&mut self, site: String, nodes: Vec<NodeId>) {
        self.cache_log.push((site, nodes));
    }

    /// Cached values per token for one logged site: sum of column counts of
    /// the recorded tensors (rows are sequence positions).
    pub fn cached_values_per_token(&self, site: &str) -> Option<usize> {
        self.cache_log
            .iter()
            .find(|(s, _)| s == site)
            .map(|(_, nodes)| nodes.iter().map(|&n| self.value(n).cols()).sum())
    }

    pub fn cache_log_sites(&self) -> impl Iterator<Item = &str> {
        self.cache_log.iter().map(|(s, _)| s.as_str())
    }

    /// Reverse sweep from a scalar loss node, accumulating gradients of all
    /// trainable parameters into `params`. Non-trainable params untouched.
    pub fn backward(&self, loss: NodeId, params: &mut Params) -> Result<()> {
        if self.nodes.is_empty() || loss >= self.nodes.len() {
            return Err(Error::State("backward before forward".into()));
        }
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::State(format!(
                "backward: loss node is {}x{}, expected scalar",
                lv.rows(),
                lv.cols()
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(DenseMatrix::from_vec(1, 1, vec![1.0])?);

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf(Some(pid)) => {
                    let p = params.get_mut(*pid);
                    if p.trainable {
                        p.grad = p.grad.add(&g)?;
                    }
                }
                Op::Leaf(None) => {}
                Op::MatMul(a, b) => {
                    let ga = matmul(&g, &self.value(*b).transpose())?;
                    let gb = matmul(&self.value(*a).transpose(), &g)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                    accumulate(&mut grads, *a, g)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::Hadamard(a, b) => {
                    let ga = g.hadamard(self.value(*b))?;
                    let gb = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::RowBroadcastMul(a, vec) => {
                    let am = self.value(*a);
                    let vm = self.value(*vec);
                    let mut ga = DenseMatrix::zeros(am.rows(), am.cols());
                    let mut gv = DenseMatrix::zeros(1, vm.cols());
                    for i in 0..am.rows() {
                        for j in 0..am.cols() {
                            ga.set(i, j, g.get(i, j) * vm.get(0, j));
                            let acc = gv.get(0, j) + g.get(i, j) * am.get(i, j);
                            gv.set(0, j, acc);
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *vec, gv)?;
                }
                Op::Silu(a) => {
                    let am = self.value(*a);
                    let mut ga = g.clone();
                    for (gx, &x) in ga.data_mut().iter_mut().zip(am.data()) {
                        let s = sigmoid(x);
                        *gx *= s * (1.0 + x * (1.0 - s));
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::RmsNorm(x, gain) => {
                    let xm = self.value(*x);
                    let gm = self.value(*gain);
                    let d = xm.cols();
                    let mut gx = DenseMatrix::zeros(xm.rows(), d);
                    let mut gg = DenseMatrix::zeros(1, d);
                    for i in 0..xm.rows() {
                        let r = row_rms(xm.row(i));
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += g.get(i, j) * gm.get(0, j) * xm.get(i, j);
                        }
                        for j in 0..d {
                            let gij = g.get(i, j) * gm.get(0, j) / r
                                - xm.get(i, j) * dot / (d as f64 * r * r * r);
                            gx.set(i, j, gij);
                            let acc = gg.get(0, j) + g.get(i, j) * xm.get(i, j) / r;
                            gg.set(0, j, acc);
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                    accumulate(&mut grads, *gain, gg)?;
                }
                Op::SliceCols(a, start, len) => {
                    let am = self.value(*a);
                    let mut ga = DenseMatrix::zeros(am.rows(), am.cols());
                    for i in 0..am.rows() {
                        for j in 0..*len {
                            ga.set(i, start + j, g.get(i, j));
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut gp = DenseMatrix::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            for j in 0..cols {
                                gp.set(i, j, g.get(i, off + j));
                            }
                        }
                        accumulate(&mut grads, p, gp)?;
                        off += cols;
                    }
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::AddConst(a) => accumulate(&mut grads, *a, g)?,
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut ga = DenseMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let mut dot = 0.0;
                        for j in 0..y.cols() {
                            dot += g.get(i, j) * y.get(i, j);
                        }
                        for j in 0..y.cols() {
                            ga.set(i, j, y.get(i, j) * (g.get(i, j) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, ga)?;
                }
                Op::GatherRows(table, ids) => {
                    let tm = self.value(*table);
                    let mut gt = DenseMatrix::zeros(tm.rows(), tm.cols());
                    for (s, &i) in ids.iter().enumerate() {
                        for j in 0..tm.cols() {
                            let acc = gt.get(i, j) + g.get(s, j);
                            gt.set(i, j, acc);
                        }
                    }
                    accumulate(&mut grads, *table, gt)?;
                }
                Op::Sum(a) => {
                    let am = self.value(*a);
                    let gs = g.get(0, 0);
                    accumulate(&mut grads, *a, DenseMatrix::zeros(am.rows(), am.cols()).map(|_| gs))?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                } => {
                    let lm = self.value(*logits);
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let gs = g.get(0, 0) / count;
                    let mut gl = DenseMatrix::zeros(lm.rows(), lm.cols());
                    for s in 0..lm.rows() {
                        if !mask[s] {
                            continue;
                        }
                        let row = lm.row(s);
                        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                        let denom: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                        for j in 0..lm.cols() {
                            let p = (lm.get(s, j) - max).exp() / denom;
                            let onehot = if j == targets[s] { 1.0 } else { 0.0 };
                            gl.set(s, j, gs * (p - onehot));
                        }
                    }
                    accumulate(&mut grads, *logits, gl)?;
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], id: NodeId, delta: DenseMatrix) -> Result<()> {
    match &mut grads[id] {
        Some(g) => *g = g.add(&delta)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row_rms(row: &[f64]) -> f64 {
    let mean_sq = row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64;
    (mean_sq + RMS_EPS).sqrt()
}

fn row_logsumexp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numlin::{kaiming_uniform, Rng};

    #[test]
    fn backward_sum_is_ones() {
        let mut params = Params::new();
        let w = params
            .register("w", DenseMatrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true)
            .unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(&params, w);
        let loss = tape.sum(wn);
        tape.backward(loss, &mut params).unwrap();
        assert_eq!(params.get(w).grad.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_wx_squared_closed_form() {
        // loss = ||x W||^2, row-vector convention: grad(W) = 2 x^T (x W)
        let mut rng = Rng::new(8);
        let mut params = Params::new();
        let wv = kaiming_uniform(&mut rng, 3, 2, 3).unwrap();
        let xv = kaiming_uniform(&mut rng, 1, 3, 1).unwrap();
        let w = params.register("w", wv.clone(), true).unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(&params, w);
        let xn = tape.constant(xv.clone());
        let y = tape.matmul(xn, wn).unwrap();
        let sq = tape.hadamard(y, y).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut params).unwrap();

        let y = matmul(&xv, &wv).unwrap();
        let expected = matmul(&xv.transpose(), &y).unwrap().scale(2.0);
        assert!(params.get(w).grad.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut params = Params::new();
        let w = params.register("w", DenseMatrix::zeros(2, 2), true).unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(&params, w);
        assert!(matches!(
            tape.backward(wn, &mut params),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn backward_deterministic() {
        let mut rng = Rng::new(12);
        let run = |params: &mut Params| {
            let w = params.id_of("w").unwrap();
            let mut tape = Tape::new();
            let wn = tape.param(params, w);
            let s = tape.silu(wn);
            let sm = tape.softmax_rows(s);
            let loss = tape.cross_entropy_masked(sm, &[1, 0], &[true, true]).unwrap();
            tape.backward(loss, params).unwrap();
            params.get(w).grad.clone()
        };
        let wv = kaiming_uniform(&mut rng, 2, 4, 2).unwrap();
        let mut p1 = Params::new();
        p1.register("w", wv.clone(), true).unwrap();
        let mut p2 = Params::new();
        p2.register("w", wv, true).unwrap();
        let g1 = run(&mut p1);
        let g2 = run(&mut p2);
        assert_eq!(g1.data(), g2.data());
    }

    #[test]
    fn frozen_params_untouched() {
        let mut params = Params::new();
        let w = params.register("w", DenseMatrix::identity(2), false).unwrap();
        let mut tape = Tape::new();
        let wn = tape.param(&params, w);
        let loss = tape.sum(wn);
        tape.backward(loss, &mut params).unwrap();
        assert!(params.get(w).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn softmax_rows_normalized() {
        let mut tape = Tape::new();
        let a = tape.constant(DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let s = tape.softmax_rows(a);
        for i in 0..2 {
            let sum: f64 = tape.value(s).row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
