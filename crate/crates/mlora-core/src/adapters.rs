//! LoRA and MultiLoRA adapter sites: initialization, forward composition,
//! ΔW materialization and weight merging.
//!
//! Row-vector convention throughout: `y = x W`, `A: d_in -> r`,
//! `B: r -> d_out`. LoRA applies the static `alpha / r` scale; MultiLoRA
//! carries no static factor — its learnable per-output-channel scaling
//! vectors subsume it and are zero-initialized so training starts exactly
//! at the base model (starting point initialization).

use crate::autodiff::{NodeId, ParamId, Params, Tape};
use crate::error::{Error, Result};
use crate::model::{Model, Target};
use crate::numlin::{kaiming_uniform, matmul, DenseMatrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ft,
    Lora,
    MultiLora,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Lora => "lora",
            Method::MultiLora => "multilora",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "ft" => Ok(Method::Ft),
            "lora" => Ok(Method::Lora),
            "multilora" => Ok(Method::MultiLora),
            other => Err(Error::Argument(format!(
                "unknown method {other:?}; expected ft, lora or multilora"
            ))),
        }
    }
}

/// Value-level LoRA adapter for one site.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(a: DenseMatrix, b: DenseMatrix, alpha: f64) -> Result<Self> {
        let rank = a.cols();
        if b.rows() != rank {
            return Err(Error::Shape(format!(
                "lora: A is {}x{} but B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        check_rank(rank, a.rows(), b.cols())?;
        Ok(LoraAdapter { a, b, rank, alpha })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Value-level MultiLoRA adapter: n parallel rank-r modules with
/// per-output-channel scaling vectors (stored `1 x d_out`).
#[derive(Debug, Clone)]
pub struct MultiLoraAdapter {
    pub a_list: Vec<DenseMatrix>,
    pub b_list: Vec<DenseMatrix>,
    pub scaling_list: Vec<DenseMatrix>,
}

impl MultiLoraAdapter {
    pub fn new(
        a_list: Vec<DenseMatrix>,
        b_list: Vec<DenseMatrix>,
        scaling_list: Vec<DenseMatrix>,
    ) -> Result<Self> {
        if a_list.is_empty() || a_list.len() != b_list.len() || a_list.len() != scaling_list.len()
        {
            return Err(Error::Argument("multilora: inconsistent module lists".into()));
        }
        let rank = a_list[0].cols();
        let d_in = a_list[0].rows();
        let d_out = b_list[0].cols();
        check_rank(rank, d_in, d_out)?;
        for ((a, b), s) in a_list.iter().zip(&b_list).zip(&scaling_list) {
            if a.rows() != d_in || a.cols() != rank || b.rows() != rank || b.cols() != d_out {
                return Err(Error::Shape("multilora: module shape mismatch".into()));
            }
            if s.rows() != 1 || s.cols() != d_out {
                return Err(Error::Shape("multilora: scaling must be 1 x d_out".into()));
            }
        }
        Ok(MultiLoraAdapter {
            a_list,
            b_list,
            scaling_list,
        })
    }

    pub fn n(&self) -> usize {
        self.a_list.len()
    }

    pub fn rank(&self) -> usize {
        self.a_list[0].cols()
    }

    /// ΔW of one sub-module: `(A_i B_i) diag(scaling_i)`.
    pub fn sub_delta(&self, i: usize) -> Result<DenseMatrix> {
        let mut d = matmul(&self.a_list[i], &self.b_list[i])?;
        let s = &self.scaling_list[i];
        for r in 0..d.rows() {
            for c in 0..d.cols() {
                let v = d.get(r, c) * s.get(0, c);
                d.set(r, c, v);
            }
        }
        Ok(d)
    }
}

fn check_rank(rank: usize, d_in: usize, d_out: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::Argument("adapter rank must be >= 1".into()));
    }
    if rank > d_in.min(d_out) {
        return Err(Error::Argument(format!(
            "adapter rank {rank} exceeds min(d_in, d_out) = {}",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

/// One adapter, either kind, as plain matrices.
#[derive(Debug, Clone)]
pub enum AdapterValues {
    Lora(LoraAdapter),
    Multi(MultiLoraAdapter),
}

/// `Δy = (alpha/r) (x A) B`.
pub fn lora_delta_forward(x: &DenseMatrix, adapter: &LoraAdapter) -> Result<DenseMatrix> {
    let xa = matmul(x, &adapter.a)?;
    Ok(matmul(&xa, &adapter.b)?.scale(adapter.scale()))
}

/// `Δy = Σ_i scaling_i ⊙ ((x A_i) B_i)`, the scaling broadcast over rows.
pub fn multilora_delta_forward(
    x: &DenseMatrix,
    adapter: &MultiLoraAdapter,
) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(x.rows(), adapter.b_list[0].cols());
    for i in 0..adapter.n() {
        let m = matmul(&matmul(x, &adapter.a_list[i])?, &adapter.b_list[i])?;
        let s = &adapter.scaling_list[i];
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + m.get(r, c) * s.get(0, c);
                out.set(r, c, v);
            }
        }
    }
    Ok(out)
}

/// ΔW as a dense `d_in x d_out` matrix.
pub fn materialize_delta(adapter: &AdapterValues) -> Result<DenseMatrix> {
    match adapter {
        AdapterValues::Lora(l) => Ok(matmul(&l.a, &l.b)?.scale(l.scale())),
        AdapterValues::Multi(m) => {
            let mut out = DenseMatrix::zeros(m.a_list[0].rows(), m.b_list[0].cols());
            for i in 0..m.n() {
                out = out.add(&m.sub_delta(i)?)?;
            }
            Ok(out)
        }
    }
}

enum SiteKind {
    Lora { a: ParamId, b: ParamId },
    Multi { modules: Vec<ModuleIds> },
}

struct ModuleIds {
    a: ParamId,
    b: ParamId,
    scaling: ParamId,
}

struct SiteIds {
    layer: usize,
    target: Target,
    kind: SiteKind,
}

/// Adapters attached to a model's projection sites, with their parameters
/// registered in the shared `Params` registry.
pub struct AdapterSet {
    pub method: Method,
    pub rank: usize,
    pub n: usize,
    pub alpha: f64,
    sites: Vec<SiteIds>,
    merged: bool,
}

/// Attach LoRA adapters: base weights frozen, per site `A` Kaiming-Uniform
/// with fan_in = d_in and `B = 0`, so adapted logits start bit-identical
/// to the base model.
pub fn attach_lora(
    model: &Model,
    params: &mut Params,
    targets: &[Target],
    rank: usize,
    alpha: f64,
    rng: &mut Rng,
) -> Result<AdapterSet> {
    validate_targets(model, targets, rank)?;
    params.set_all_trainable(false);
    let mut sites = Vec::new();
    for layer in 0..model.config.n_layers {
        for &target in targets {
            let (d_in, d_out) = model.config.site_dims(target);
            let base = Model::site_name(layer, target);
            let a = params.register(
                &format!("{base}.lora_a"),
                kaiming_uniform(rng, d_in, rank, d_in)?,
                true,
            )?;
            let b = params.register(&format!("{base}.lora_b"), DenseMatrix::zeros(rank, d_out), true)?;
            sites.push(SiteIds {
                layer,
                target,
                kind: SiteKind::Lora { a, b },
            });
        }
    }
    Ok(AdapterSet {
        method: Method::Lora,
        rank,
        n: 1,
        alpha,
        sites,
        merged: false,
    })
}

/// Attach MultiLoRA adapters: per site, n pairs `(A_i, B_i)` both
/// Kaiming-Uniform and zero-initialized scaling vectors, all trainable;
/// base weights frozen.
pub fn attach_multilora(
    model: &Model,
    params: &mut Params,
    targets: &[Target],
    n: usize,
    rank: usize,
    rng: &mut Rng,
) -> Result<AdapterSet> {
    if n == 0 {
        return Err(Error::Argument("multilora: n must be >= 1".into()));
    }
    validate_targets(model, targets, rank)?;
    params.set_all_trainable(false);
    let mut sites = Vec::new();
    for layer in 0..model.config.n_layers {
        for &target in targets {
            let (d_in, d_out) = model.config.site_dims(target);
            let base = Model::site_name(layer, target);
            let mut modules = Vec::with_capacity(n);
            for i in 0..n {
                let a = params.register(
                    &format!("{base}.multi.{i}.a"),
                    kaiming_uniform(rng, d_in, rank, d_in)?,
                    true,
                )?;
                let b = params.register(
                    &format!("{base}.multi.{i}.b"),
                    kaiming_uniform(rng, rank, d_out, rank)?,
                    true,
                )?;
                let scaling = params.register(
                    &format!("{base}.multi.{i}.scaling"),
                    DenseMatrix::zeros(1, d_out),
                    true,
                )?;
                modules.push(ModuleIds { a, b, scaling });
            }
            sites.push(SiteIds {
                layer,
                target,
                kind: SiteKind::Multi { modules },
            });
        }
    }
    Ok(AdapterSet {
        method: Method::MultiLora,
        rank,
        n,
        alpha: 0.0,
        sites,
        merged: false,
    })
}

fn validate_targets(model: &Model, targets: &[Target], rank: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::Argument("no adapter targets given".into()));
    }
    let mut seen = Vec::new();
    for &t in targets {
        if seen.contains(&t) {
            return Err(Error::Argument(format!("duplicate target {}", t.name())));
        }
        seen.push(t);
        let (d_in, d_out) = model.config.site_dims(t);
        check_rank(rank, d_in, d_out)?;
    }
    Ok(())
}

impl AdapterSet {
    pub fn is_merged(&self) -> bool {
        self.merged
    }

    fn find(&self, layer: usize, target: Target) -> Option<&SiteIds> {
        self.sites
            .iter()
            .find(|s| s.layer == layer && s.target == target)
    }

    /// List of (layer, target) adapter sites.
    pub fn site_list(&self) -> Vec<(usize, Target)> {
        self.sites.iter().map(|s| (s.layer, s.target)).collect()
    }

    /// Tape-level Δy for one site, or None when the site is not adapted.
    /// Logs the tensors a backward pass keeps alive for the site, which the
    /// bench counters read back.
    pub fn delta_forward(
        &self,
        params: &Params,
        tape: &mut Tape,
        x: NodeId,
        layer: usize,
        target: Target,
    ) -> Result<Option<NodeId>> {
        if self.merged {
            return Ok(None);
        }
        let Some(site) = self.find(layer, target) else {
            return Ok(None);
        };
        let site_name = Model::site_name(layer, target);
        match &site.kind {
            SiteKind::Lora { a, b } => {
                let an = tape.param(params, *a);
                let bn = tape.param(params, *b);
                let xa = tape.matmul(x, an)?;
                let xab = tape.matmul(xa, bn)?;
                let out = tape.scale(xab, self.alpha / self.rank as f64);
                tape.log_site_cache(site_name, vec![xa]);
                Ok(Some(out))
            }
            SiteKind::Multi { modules } => {
                let mut cached = Vec::with_capacity(2 * modules.len());
                let mut acc: Option<NodeId> = None;
                for m in modules {
                    let an = tape.param(params, m.a);
                    let bn = tape.param(params, m.b);
                    let sn = tape.param(params, m.scaling);
                    let xa = tape.matmul(x, an)?;
                    let pre = tape.matmul(xa, bn)?;
                    let scaled = tape.row_broadcast_mul(pre, sn)?;
                    cached.push(xa);
                    cached.push(pre);
                    acc = Some(match acc {
                        None => scaled,
                        Some(prev) => tape.add(prev, scaled)?,
                    });
                }
                tape.log_site_cache(site_name, cached);
                Ok(acc)
            }
        }
    }

    /// Extract one site's adapter as plain matrices.
    pub fn site_values(&self, params: &Params, layer: usize, target: Target) -> Option<AdapterValues> {
        let site = self.find(layer, target)?;
        Some(match &site.kind {
            SiteKind::Lora { a, b } => AdapterValues::Lora(LoraAdapter {
                a: params.value(*a).clone(),
                b: params.value(*b).clone(),
                rank: self.rank,
                alpha: self.alpha,
            }),
            SiteKind::Multi { modules } => AdapterValues::Multi(MultiLoraAdapter {
                a_list: modules.iter().map(|m| params.value(m.a).clone()).collect(),
                b_list: modules.iter().map(|m| params.value(m.b).clone()).collect(),
                scaling_list: modules
                    .iter()
                    .map(|m| params.value(m.scaling).clone())
                    .collect(),
            }),
        })
    }

    /// Fold every site's ΔW into the base weight. The set becomes inert;
    /// merging twice is a state error.
    pub fn merge(&mut self, model: &Model, params: &mut Params) -> Result<()> {
        if self.merged {
            return Err(Error::State("adapters already merged".into()));
        }
        for site in &self.sites {
            let values = self
                .site_values(params, site.layer, site.target)
                .expect("site listed but not found");
            let delta = materialize_delta(&values)?;
            let wid = model.site_param(site.layer, site.target);
            let merged = params.value(wid).add(&delta)?;
            params.get_mut(wid).value = merged;
        }
        self.merged = true;
        Ok(())
    }

    /// (matmul params, total trainable params). The first excludes scaling
    /// vectors, matching equal-budget comparisons by total rank; the second
    /// includes them.
    pub fn param_counts(&self, model: &Model) -> (usize, usize) {
        let mut matmul_params = 0;
        let mut total = 0;
        for site in &self.sites {
            let (d_in, d_out) = model.config.site_dims(site.target);
            match &site.kind {
                SiteKind::Lora { .. } => {
                    matmul_params += self.rank * (d_in + d_out);
                    total += self.rank * (d_in + d_out);
                }
                SiteKind::Multi { modules } => {
                    matmul_params += modules.len() * self.rank * (d_in + d_out);
                    total += modules.len() * (self.rank * (d_in + d_out) + d_out);
                }
            }
        }
        (matmul_params, total)
    }
}
