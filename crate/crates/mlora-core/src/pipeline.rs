//! End-to-end orchestration: run configuration, the deterministic training
//! loop, adapter merging against a trained checkpoint, ΔW extraction, and
//! the one-command analysis recipe.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::adapters::{attach_lora, attach_multilora, AdapterSet, Method};
use crate::autodiff::{adamw_step, AdamWConfig, OptimState, Params, Schedule, Tape};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Target};
use crate::numlin::{DenseMatrix, Precision, Rng};
use crate::spectral::{
    fmt_sig, similarity_grid_labeled, sv_histogram, Aggregation, DEFAULT_BINS, DEFAULT_MAX_RANK,
};
use crate::store::{
    delta_from_checkpoints, format_config_text, parse_config_text, save_checkpoint, Checkpoint,
    CheckpointMeta,
};
use crate::tasks::{batchify, gen_mixture, Batch, MixtureSpec};

/// Everything a run needs: model dims, adaptation method and its shape,
/// optimizer schedule, seed and data mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub method: Method,
    pub rank: usize,
    pub n: usize,
    pub alpha: f64,
    pub targets: Vec<Target>,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// Fixed step count overriding `epochs × batches`; the batch sequence
    /// cycles.
    pub steps_override: Option<usize>,
    pub mixture: MixtureSpec,
}

pub const DEFAULT_LR_FT: f64 = 5e-6;
pub const DEFAULT_LR_ADAPTER: f64 = 5e-5;

impl RunConfig {
    pub fn default_for(method: Method) -> Self {
        RunConfig {
            model: ModelConfig::desk_default(),
            method,
            rank: 8,
            n: 3,
            alpha: 8.0,
            targets: Target::ALL.to_vec(),
            lr: match method {
                Method::Ft => DEFAULT_LR_FT,
                _ => DEFAULT_LR_ADAPTER,
            },
            epochs: 2,
            batch: 8,
            warmup_ratio: 0.05,
            seed: 0,
            steps_override: None,
            mixture: MixtureSpec {
                choice: 256,
                copy: 256,
                arith: 256,
                longgen: 256,
                seed: 17,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch == 0 {
            return Err(Error::Argument("batch must be >= 1".into()));
        }
        if self.epochs == 0 && self.steps_override.is_none() {
            return Err(Error::Argument("epochs must be >= 1 without a step override".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Argument(format!(
                "warmup_ratio {} outside [0, 1]",
                self.warmup_ratio
            )));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Argument(format!("bad learning rate {}", self.lr)));
        }
        if self.method != Method::Ft {
            if self.rank == 0 {
                return Err(Error::Argument("adapter rank must be >= 1".into()));
            }
            if self.targets.is_empty() {
                return Err(Error::Argument("adapter methods need at least one target".into()));
            }
        }
        if self.method == Method::MultiLora && self.n == 0 {
            return Err(Error::Argument("multilora needs n >= 1".into()));
        }
        if self.mixture.total() == 0 {
            return Err(Error::Argument("empty data mixture".into()));
        }
        Ok(())
    }

    /// Canonical flat `key = value` form; the digest hashes exactly this.
    pub fn to_text(&self) -> String {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("d_model", self.model.d_model.to_string());
        put("n_heads", self.model.n_heads.to_string());
        put("d_mid", self.model.d_mid.to_string());
        put("n_layers", self.model.n_layers.to_string());
        put("vocab", self.model.vocab.to_string());
        put("max_seq", self.model.max_seq.to_string());
        put(
            "precision",
            match self.model.precision {
                Precision::Single => "single".into(),
                Precision::Double => "double".into(),
            },
        );
        put("method", self.method.name().into());
        put("rank", self.rank.to_string());
        put("n", self.n.to_string());
        put("alpha", format!("{}", self.alpha));
        put(
            "targets",
            self.targets.iter().map(|t| t.name()).collect::<Vec<_>>().join(","),
        );
        put("lr", format!("{:e}", self.lr));
        put("epochs", self.epochs.to_string());
        put("batch", self.batch.to_string());
        put("warmup_ratio", format!("{}", self.warmup_ratio));
        put("seed", self.seed.to_string());
        if let Some(s) = self.steps_override {
            put("steps", s.to_string());
        }
        put("mix_choice", self.mixture.choice.to_string());
        put("mix_copy", self.mixture.copy.to_string());
        put("mix_arith", self.mixture.arith.to_string());
        put("mix_longgen", self.mixture.longgen.to_string());
        put("mix_seed", self.mixture.seed.to_string());
        format_config_text(&kv)
    }

    /// Parse a config text. Starts from the method's defaults so partial
    /// files are valid overrides.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let kv = parse_config_text(text)?;
        let method = match kv.get("method") {
            Some(m) => Method::parse(m)?,
            None => return Err(Error::Format("config missing required key `method`".into())),
        };
        let mut cfg = RunConfig::default_for(method);
        for (key, value) in &kv {
            let bad = || Error::Format(format!("config key {key}: bad value {value:?}"));
            match key.as_str() {
                "method" => {}
                "d_model" => cfg.model.d_model = value.parse().map_err(|_| bad())?,
                "n_heads" => cfg.model.n_heads = value.parse().map_err(|_| bad())?,
                "d_mid" => cfg.model.d_mid = value.parse().map_err(|_| bad())?,
                "n_layers" => cfg.model.n_layers = value.parse().map_err(|_| bad())?,
                "vocab" => cfg.model.vocab = value.parse().map_err(|_| bad())?,
                "max_seq" => cfg.model.max_seq = value.parse().map_err(|_| bad())?,
                "precision" => {
                    cfg.model.precision = match value.as_str() {
                        "single" => Precision::Single,
                        "double" => Precision::Double,
                        _ => return Err(bad()),
                    }
                }
                "rank" => cfg.rank = value.parse().map_err(|_| bad())?,
                "n" => cfg.n = value.parse().map_err(|_| bad())?,
                "alpha" => cfg.alpha = value.parse().map_err(|_| bad())?,
                "targets" => {
                    cfg.targets = value
                        .split(',')
                        .map(|t| Target::parse(t.trim()))
                        .collect::<Result<Vec<_>>>()?;
                }
                "lr" => cfg.lr = value.parse().map_err(|_| bad())?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad())?,
                "batch" => cfg.batch = value.parse().map_err(|_| bad())?,
                "warmup_ratio" => cfg.warmup_ratio = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "steps" => cfg.steps_override = Some(value.parse().map_err(|_| bad())?),
                "mix_choice" => cfg.mixture.choice = value.parse().map_err(|_| bad())?,
                "mix_copy" => cfg.mixture.copy = value.parse().map_err(|_| bad())?,
                "mix_arith" => cfg.mixture.arith = value.parse().map_err(|_| bad())?,
                "mix_longgen" => cfg.mixture.longgen = value.parse().map_err(|_| bad())?,
                "mix_seed" => cfg.mixture.seed = value.parse().map_err(|_| bad())?,
                other => return Err(Error::Format(format!("unknown config key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn digest(&self) -> u64 {
        crc32fast::hash(self.to_text().as_bytes()) as u64
    }
}

/// A built run: model weights (and adapters, if any) registered in one
/// parameter registry. Parameter ids below `base_param_count` are the base
/// model's.
pub struct Run {
    pub model: Model,
    pub params: Params,
    pub adapters: Option<AdapterSet>,
    pub base_param_count: usize,
}

pub fn build_run(cfg: &RunConfig) -> Result<Run> {
    cfg.validate()?;
    let mut seed_rng = Rng::new(cfg.seed);
    let mut model_rng = seed_rng.fork(0);
    let mut adapter_rng = seed_rng.fork(1);
    let mut params = Params::new();
    let model = Model::new(cfg.model, &mut params, &mut model_rng)?;
    let base_param_count = params.len();
    let adapters = match cfg.method {
        Method::Ft => None,
        Method::Lora => Some(attach_lora(
            &model,
            &mut params,
            &cfg.targets,
            cfg.rank,
            cfg.alpha,
            &mut adapter_rng,
        )?),
        Method::MultiLora => Some(attach_multilora(
            &model,
            &mut params,
            &cfg.targets,
            cfg.n,
            cfg.rank,
            &mut adapter_rng,
        )?),
    };
    Ok(Run {
        model,
        params,
        adapters,
        base_param_count,
    })
}

/// Snapshot the registry into a checkpoint.
pub fn checkpoint_from_params(cfg: &RunConfig, params: &Params, step: u64) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(CheckpointMeta {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        step,
    });
    for (_, p) in params.iter() {
        ckpt.insert(&p.name, p.value.clone())?;
    }
    Ok(ckpt)
}

/// The freshly initialized (untrained) checkpoint of a config.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let run = build_run(cfg)?;
    checkpoint_from_params(cfg, &run.params, 0)
}

/// Overwrite registry values with a checkpoint's tensors, matching by name.
pub fn load_into_params(params: &mut Params, ckpt: &Checkpoint) -> Result<()> {
    for id in 0..params.len() {
        let p = params.get(id);
        let t = ckpt.get(&p.name).ok_or_else(|| {
            Error::Format(format!("checkpoint missing tensor {:?}", p.name))
        })?;
        if t.rows() != p.value.rows() || t.cols() != p.value.cols() {
            return Err(Error::Format(format!(
                "checkpoint tensor {:?}: shape {}x{} does not match {}x{}",
                p.name,
                t.rows(),
                t.cols(),
                p.value.rows(),
                p.value.cols()
            )));
        }
        params.get_mut(id).value = t.clone();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Stateful deterministic trainer; one `step()` is one optimizer update on
/// the next cycled batch.
pub struct Trainer {
    pub run: Run,
    batches: Vec<Batch>,
    schedule: Schedule,
    opt: OptimState,
    adamw: AdamWConfig,
    pub total_steps: usize,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Trainer> {
        let run = build_run(cfg)?;
        let samples = gen_mixture(&cfg.mixture)?;
        let batches = batchify(&samples, cfg.batch)?;
        let total_steps = cfg.steps_override.unwrap_or(cfg.epochs * batches.len());
        if total_steps == 0 {
            return Err(Error::Argument("training run has zero steps".into()));
        }
        let schedule = Schedule {
            base_lr: cfg.lr,
            total_steps,
            warmup_ratio: cfg.warmup_ratio,
        };
        let opt = OptimState::new(&run.params);
        Ok(Trainer {
            run,
            batches,
            schedule,
            opt,
            adamw: AdamWConfig::default(),
            total_steps,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Returns the log row and the number of (padded) tokens processed.
    pub fn step(&mut self) -> Result<(LogRow, usize)> {
        if self.step >= self.total_steps {
            return Err(Error::State("trainer already ran all steps".into()));
        }
        let batch = &self.batches[self.step % self.batches.len()];
        let tokens: usize = batch.sequences.iter().map(Vec::len).sum();
        self.run.params.zero_grads();
        let mut tape = Tape::new();
        let mut acc = None;
        for (seq, mask) in batch.sequences.iter().zip(&batch.masks) {
            let l = self.run.model.forward_loss(
                &self.run.params,
                &mut tape,
                seq,
                Some(mask),
                self.run.adapters.as_ref(),
            )?;
            acc = Some(match acc {
                None => l,
                Some(prev) => tape.add(prev, l)?,
            });
        }
        let mean = tape.scale(acc.expect("non-empty batch"), 1.0 / batch.len() as f64);
        let loss = tape.value(mean).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {}",
                self.step + 1
            )));
        }
        tape.backward(mean, &mut self.run.params)?;
        let lr = self.schedule.lr_at(self.step + 1)?;
        adamw_step(&mut self.run.params, &mut self.opt, lr, &self.adamw)?;
        self.step += 1;
        Ok((
            LogRow {
                step: self.step,
                loss,
                lr,
            },
            tokens,
        ))
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.log.first().map(|r| r.loss).unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map(|r| r.loss).unwrap_or(f64::NAN)
    }
}

pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let mut log = Vec::with_capacity(trainer.total_steps);
    for _ in 0..trainer.total_steps {
        let (row, _) = trainer.step()?;
        log.push(row);
    }
    let checkpoint = checkpoint_from_params(cfg, &trainer.run.params, trainer.total_steps as u64)?;
    Ok(TrainOutcome { checkpoint, log })
}

pub fn loss_log_csv(log: &[LogRow]) -> String {
    let mut out = String::from("step,loss,lr\n");
    for r in log {
        out.push_str(&format!("{},{},{}\n", r.step, fmt_sig(r.loss, 12), fmt_sig(r.lr, 12)));
    }
    out
}

pub struct MergeOutcome {
    /// Plain-weight checkpoint (base tensors only, adapters folded in).
    pub checkpoint: Checkpoint,
    /// Max |logit| deviation between adapted and merged forward on probes.
    pub max_deviation: f64,
}

/// Deterministic probe sequences for merge validation.
pub fn probe_sequences(cfg: &RunConfig, count: usize, len: usize) -> Vec<Vec<usize>> {
    let mut rng = Rng::new(cfg.seed ^ 0x70b3);
    (0..count)
        .map(|_| (0..len).map(|_| rng.next_below(cfg.model.vocab)).collect())
        .collect()
}

/// Rebuild the run, load the trained checkpoint, fold the adapters into the
/// base weights and report the max probe-logit deviation.
pub fn merge_from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<MergeOutcome> {
    if cfg.method == Method::Ft {
        return Err(Error::Argument(
            "full fine-tuning checkpoints have no adapters to merge".into(),
        ));
    }
    let mut run = build_run(cfg)?;
    load_into_params(&mut run.params, ckpt)?;
    let probes = probe_sequences(cfg, 8, 16);

    let adapted = forward_probe_logits(&run, &probes)?;
    run.adapters
        .as_mut()
        .expect("adapter method always builds a set")
        .merge(&run.model, &mut run.params)?;
    let merged = forward_probe_logits(&run, &probes)?;

    let mut max_deviation = 0.0f64;
    for (a, m) in adapted.iter().zip(&merged) {
        max_deviation = max_deviation.max(a.max_abs_diff(m));
    }

    let mut out = Checkpoint::new(CheckpointMeta {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        step: ckpt.meta.step,
    });
    for id in 0..run.base_param_count {
        let p = run.params.get(id);
        out.insert(&p.name, p.value.clone())?;
    }
    Ok(MergeOutcome {
        checkpoint: out,
        max_deviation,
    })
}

fn forward_probe_logits(run: &Run, probes: &[Vec<usize>]) -> Result<Vec<DenseMatrix>> {
    probes
        .iter()
        .map(|ids| {
            let mut tape = Tape::new();
            let node = run
                .model
                .forward_logits(&run.params, &mut tape, ids, run.adapters.as_ref())?;
            Ok(tape.value(node).clone())
        })
        .collect()
}

/// ΔW per layer at one projection site: tuned minus base.
pub fn site_delta_list(
    model: &ModelConfig,
    base: &Checkpoint,
    tuned: &Checkpoint,
    target: Target,
) -> Result<Vec<DenseMatrix>> {
    (0..model.n_layers)
        .map(|l| delta_from_checkpoints(base, tuned, &Model::site_name(l, target)))
        .collect()
}

/// Files written by the one-command analysis recipe.
pub struct ReproReport {
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Full toy-scale pipeline: train FT, LoRA and MultiLoRA from the same base
/// weights, merge the adapters, extract per-site ΔW, and write histogram
/// and similarity-grid CSVs plus a qualitative summary. The LoRA spectrum
/// zero-count bound (≥ d_out − R per layer) is a hard check.
pub fn run_repro(out_dir: &Path, seed: u64, steps: usize) -> Result<ReproReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let mut ft_cfg = RunConfig::default_for(Method::Ft);
    let mut lora_cfg = RunConfig::default_for(Method::Lora);
    let mut multi_cfg = RunConfig::default_for(Method::MultiLora);
    for cfg in [&mut ft_cfg, &mut lora_cfg, &mut multi_cfg] {
        cfg.seed = seed;
        cfg.steps_override = Some(steps);
    }

    let base = initial_checkpoint(&ft_cfg)?;
    let base_path = out_dir.join("base.ckpt");
    save_checkpoint(&base_path, &base)?;
    files.push(base_path);

    let mut tuned: Vec<(Method, Checkpoint)> = Vec::new();
    for cfg in [&ft_cfg, &lora_cfg, &multi_cfg] {
        let outcome = run_train(cfg)?;
        let name = cfg.method.name();
        let log_path = out_dir.join(format!("{name}_loss.csv"));
        std::fs::write(&log_path, loss_log_csv(&outcome.log))?;
        files.push(log_path);
        let raw_path = out_dir.join(format!("{name}.ckpt"));
        save_checkpoint(&raw_path, &outcome.checkpoint)?;
        files.push(raw_path);

        let plain = if cfg.method == Method::Ft {
            outcome.checkpoint
        } else {
            let merge = merge_from_checkpoint(cfg, &outcome.checkpoint)?;
            let merged_path = out_dir.join(format!("{name}_merged.ckpt"));
            save_checkpoint(&merged_path, &merge.checkpoint)?;
            files.push(merged_path);
            merge.checkpoint
        };
        tuned.push((cfg.method, plain));
    }

    let mut summary = String::from("qualitative findings (informational, not pass/fail)\n");
    for target in Target::ALL {
        let mut deltas: Vec<(Method, Vec<DenseMatrix>)> = Vec::new();
        for (method, ckpt) in &tuned {
            deltas.push((
                *method,
                site_delta_list(&ft_cfg.model, &base, ckpt, target)?,
            ));
        }

        for (method, dws) in &deltas {
            let per_layer = sv_histogram(dws, DEFAULT_BINS, Aggregation::PerLayer)?;
            if *method == Method::Lora {
                let (d_in, d_out) = ft_cfg.model.site_dims(target);
                // a rank-R delta has at most R nonzero singular values out
                // of min(d_in, d_out)
                let bound = (d_in.min(d_out) - lora_cfg.rank) as f64;
                for (layer, h) in per_layer.iter().enumerate() {
                    if h.zero_count < bound {
                        return Err(Error::Numeric(format!(
                            "lora spectrum at {} layer {layer}: zero count {} below bound {bound}",
                            target.name(),
                            h.zero_count
                        )));
                    }
                }
            }
            let mean = sv_histogram(dws, DEFAULT_BINS, Aggregation::Mean)?.remove(0);
            let path = out_dir.join(format!("hist_{}_{}.csv", method.name(), target.name()));
            std::fs::write(&path, mean.to_csv())?;
            files.push(path);
        }

        // similarity of each adapter family's ΔW against FT's, layer 0
        let ft_dw = &deltas[0].1[0];
        let mut diag_means = Vec::new();
        for (method, dws) in deltas.iter().skip(1) {
            let grid = similarity_grid_labeled(
                &dws[0],
                ft_dw,
                DEFAULT_MAX_RANK,
                method.name(),
                "ft",
                target.name(),
            )?;
            let path = out_dir.join(format!("sim_{}_vs_ft_{}.csv", method.name(), target.name()));
            std::fs::write(&path, grid.to_csv())?;
            files.push(path);
            let diag_mean: f64 = (1..=DEFAULT_MAX_RANK)
                .map(|i| grid.get(i, i))
                .sum::<f64>()
                / DEFAULT_MAX_RANK as f64;
            diag_means.push((*method, diag_mean));
        }
        summary.push_str(&format!(
            "site {}: mean diagonal phi vs ft — lora {:.4}, multilora {:.4}\n",
            target.name(),
            diag_means[0].1,
            diag_means[1].1
        ));
    }

    let summary_path = out_dir.join("summary.txt");
    std::fs::write(&summary_path, &summary)?;
    files.push(summary_path);
    Ok(ReproReport {
        out_dir: out_dir.to_path_buf(),
        files,
        summary,
    })
}
