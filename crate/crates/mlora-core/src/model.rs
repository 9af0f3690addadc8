//! Toy LLaMA-style decoder: token + learned position embeddings, pre-norm
//! decoder layers (multi-head attention and a SwiGLU MLP, no biases), a
//! gain-only RMS norm, output head and causal next-token cross-entropy.

use crate::adapters::AdapterSet;
use crate::autodiff::{NodeId, ParamId, Params, Tape, MASK_NEG};
use crate::error::{Error, Result};
use crate::numlin::{kaiming_uniform, DenseMatrix, Precision, Rng};

/// The seven adaptable linear projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    QProj,
    KProj,
    VProj,
    OProj,
    UpProj,
    DownProj,
    GateProj,
}

impl Target {
    pub const ALL: [Target; 7] = [
        Target::QProj,
        Target::KProj,
        Target::VProj,
        Target::OProj,
        Target::UpProj,
        Target::DownProj,
        Target::GateProj,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Target::QProj => "q_proj",
            Target::KProj => "k_proj",
            Target::VProj => "v_proj",
            Target::OProj => "o_proj",
            Target::UpProj => "up_proj",
            Target::DownProj => "down_proj",
            Target::GateProj => "gate_proj",
        }
    }

    pub fn parse(s: &str) -> Result<Target> {
        Target::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown target {s:?}; valid targets: q_proj, k_proj, v_proj, o_proj, up_proj, down_proj, gate_proj"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mid: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub precision: Precision,
}

impl ModelConfig {
    /// Desk-scale defaults: d=64, h=4, d_mid=172, L=2, vocab=64, max_seq=64.
    pub fn desk_default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_mid: 172,
            n_layers: 2,
            vocab: 64,
            max_seq: 64,
            precision: Precision::Double,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Argument("model dims must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Argument(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_mid <= self.d_model {
            return Err(Error::Argument(format!(
                "d_mid {} must exceed d_model {}",
                self.d_mid, self.d_model
            )));
        }
        Ok(())
    }

    /// (d_in, d_out) of a projection site.
    pub fn site_dims(&self, target: Target) -> (usize, usize) {
        match target {
            Target::QProj | Target::KProj | Target::VProj | Target::OProj => {
                (self.d_model, self.d_model)
            }
            Target::UpProj | Target::GateProj => (self.d_model, self.d_mid),
            Target::DownProj => (self.d_mid, self.d_model),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerIds {
    pub attn_norm: ParamId,
    pub mlp_norm: ParamId,
    sites: [ParamId; 7],
}

/// Decoder weights registered in a `Params` registry.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub final_norm: ParamId,
    pub unembed: ParamId,
    pub layers: Vec<LayerIds>,
}

impl Model {
    pub fn new(config: ModelConfig, params: &mut Params, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let d = config.d_model;
        let prec = config.precision;
        let tok_emb = params.register(
            "tok_emb",
            kaiming_uniform(rng, config.vocab, d, d)?.with_precision(prec),
            true,
        )?;
        let pos_emb = params.register(
            "pos_emb",
            kaiming_uniform(rng, config.max_seq, d, d)?.with_precision(prec),
            true,
        )?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let attn_norm = params.register(
                &format!("layers.{l}.attn_norm"),
                ones(1, d).with_precision(prec),
                true,
            )?;
            let mlp_norm = params.register(
                &format!("layers.{l}.mlp_norm"),
                ones(1, d).with_precision(prec),
                true,
            )?;
            let mut sites = [0; 7];
            for (k, target) in Target::ALL.iter().enumerate() {
                let (d_in, d_out) = config.site_dims(*target);
                sites[k] = params.register(
                    &format!("layers.{l}.{}", target.name()),
                    kaiming_uniform(rng, d_in, d_out, d_in)?.with_precision(prec),
                    true,
                )?;
            }
            layers.push(LayerIds {
                attn_norm,
                mlp_norm,
                sites,
            });
        }
        let final_norm = params.register("final_norm", ones(1, d).with_precision(prec), true)?;
        let unembed = params.register(
            "unembed",
            kaiming_uniform(rng, d, config.vocab, d)?.with_precision(prec),
            true,
        )?;
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            final_norm,
            unembed,
            layers,
        })
    }

    pub fn site_param(&self, layer: usize, target: Target) -> ParamId {
        let idx = Target::ALL.iter().position(|t| *t == target).unwrap();
        self.layers[layer].sites[idx]
    }

    pub fn site_name(layer: usize, target: Target) -> String {
        format!("layers.{layer}.{}", target.name())
    }

    /// One adapted (or plain) linear site: `x W + delta`.
    fn site_forward(
        &self,
        params: &Params,
        tape: &mut Tape,
        x: NodeId,
        layer: usize,
        target: Target,
        adapters: Option<&AdapterSet>,
    ) -> Result<NodeId> {
        let w = tape.param(params, self.site_param(layer, target));
        let base = tape.matmul(x, w)?;
        if let Some(set) = adapters {
            if let Some(delta) = set.delta_forward(params, tape, x, layer, target)? {
                return tape.add(base, delta);
            }
        }
        Ok(base)
    }

    /// Multi-head causal attention sublayer (post-norm input `x`).
    pub fn mha_forward(
        &self,
        params: &Params,
        tape: &mut Tape,
        x: NodeId,
        layer: usize,
        adapters: Option<&AdapterSet>,
    ) -> Result<NodeId> {
        let d = self.config.d_model;
        if tape.value(x).cols() != d {
            return Err(Error::Shape(format!(
                "mha_forward: input width {} != d_model {d}",
                tape.value(x).cols()
            )));
        }
        let seq = tape.value(x).rows();
        let dh = self.config.d_head();
        let q = self.site_forward(params, tape, x, layer, Target::QProj, adapters)?;
        let k = self.site_forward(params, tape, x, layer, Target::KProj, adapters)?;
        let v = self.site_forward(params, tape, x, layer, Target::VProj, adapters)?;
        let mask = causal_mask(seq);
        let mut heads = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let masked = tape.add_const(scaled, &mask)?;
            let attn = tape.softmax_rows(masked);
            heads.push(tape.matmul(attn, vh)?);
        }
        let concat = tape.concat_cols(&heads)?;
        self.site_forward(params, tape, concat, layer, Target::OProj, adapters)
    }

    /// SwiGLU MLP sublayer: `(silu(x W_gate) ⊙ (x W_up)) W_down`.
    pub fn mlp_forward(
        &self,
        params: &Params,
        tape: &mut Tape,
        x: NodeId,
        layer: usize,
        adapters: Option<&AdapterSet>,
    ) -> Result<NodeId> {
        let gate = self.site_forward(params, tape, x, layer, Target::GateProj, adapters)?;
        let up = self.site_forward(params, tape, x, layer, Target::UpProj, adapters)?;
        let act = tape.silu(gate);
        let gated = tape.hadamard(act, up)?;
        self.site_forward(params, tape, gated, layer, Target::DownProj, adapters)
    }

    /// Logits for every position. Pre-norm residual wiring:
    /// `x += MHA(norm(x)); x += MLP(norm(x))`.
    pub fn forward_logits(
        &self,
        params: &Params,
        tape: &mut Tape,
        ids: &[usize],
        adapters: Option<&AdapterSet>,
    ) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(Error::Argument("forward: empty sequence".into()));
        }
        if ids.len() > self.config.max_seq {
            return Err(Error::Argument(format!(
                "forward: sequence length {} exceeds max_seq {}",
                ids.len(),
                self.config.max_seq
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Argument(format!(
                "forward: token id {bad} out of vocab {}",
                self.config.vocab
            )));
        }
        let tok = tape.param(params, self.tok_emb);
        let pos = tape.param(params, self.pos_emb);
        let te = tape.gather_rows(tok, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pe = tape.gather_rows(pos, &positions)?;
        let mut x = tape.add(te, pe)?;
        for l in 0..self.config.n_layers {
            let gain = tape.param(params, self.layers[l].attn_norm);
            let normed = tape.rms_norm(x, gain)?;
            let attn = self.mha_forward(params, tape, normed, l, adapters)?;
            x = tape.add(x, attn)?;
            let gain = tape.param(params, self.layers[l].mlp_norm);
            let normed = tape.rms_norm(x, gain)?;
            let mlp = self.mlp_forward(params, tape, normed, l, adapters)?;
            x = tape.add(x, mlp)?;
        }
        let gain = tape.param(params, self.final_norm);
        let xf = tape.rms_norm(x, gain)?;
        let un = tape.param(params, self.unembed);
        tape.matmul(xf, un)
    }

    /// Mean next-token cross-entropy. `loss_mask`, when given, marks the
    /// target token positions that contribute; position `t` predicts
    /// token `t+1`.
    pub fn forward_loss(
        &self,
        params: &Params,
        tape: &mut Tape,
        ids: &[usize],
        loss_mask: Option<&[bool]>,
        adapters: Option<&AdapterSet>,
    ) -> Result<NodeId> {
        if ids.len() < 2 {
            return Err(Error::Argument("forward_loss: need at least 2 tokens".into()));
        }
        if let Some(m) = loss_mask {
            if m.len() != ids.len() {
                return Err(Error::Shape("loss mask length mismatch".into()));
            }
        }
        let logits = self.forward_logits(params, tape, ids, adapters)?;
        let t = ids.len();
        let mut targets = vec![0usize; t];
        let mut mask = vec![false; t];
        for s in 0..t - 1 {
            targets[s] = ids[s + 1];
            mask[s] = loss_mask.map_or(true, |m| m[s + 1]);
        }
        tape.cross_entropy_masked(logits, &targets, &mask)
    }
}

fn ones(rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::zeros(rows, cols).map(|_| 1.0)
}

/// Additive causal mask: 0 at or below the diagonal, a huge negative
/// value above (future positions).
pub fn causal_mask(seq: usize) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(seq, seq);
    for i in 0..seq {
        for j in (i + 1)..seq {
            m.set(i, j, MASK_NEG);
        }
    }
    m
}
