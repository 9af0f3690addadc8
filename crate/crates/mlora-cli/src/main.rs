//! `mlora` — train, merge, analyze and benchmark toy MultiLoRA runs.
//!
//! Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numeric
//! failure. Logs go to stderr; data only to files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mlora_core::adapters::{AdapterValues, Method};
use mlora_core::bench::{cost_report, measure_throughput, report_json};
use mlora_core::model::{Model, Target};
use mlora_core::pipeline::{
    build_run, initial_checkpoint, load_into_params, loss_log_csv, merge_from_checkpoint,
    run_repro, run_train, RunConfig,
};
use mlora_core::spectral::{
    pairwise_sublora_grid, similarity_grid_labeled, sv_histogram, Aggregation, DEFAULT_BINS,
    DEFAULT_MAX_RANK,
};
use mlora_core::store::{
    delta_from_checkpoints, load_checkpoint, save_checkpoint, Checkpoint,
};
use mlora_core::{DenseMatrix, Error, Result};

#[derive(Parser)]
#[command(name = "mlora", version, about = "Desk-scale MultiLoRA laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a run and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Fold a trained adapter checkpoint into plain weights.
    Merge(MergeArgs),
    /// Spectral analysis over checkpoints and ΔW files.
    Analyze {
        #[command(subcommand)]
        sub: AnalyzeCommand,
    },
    /// Emit analytic cost counters (and optional wall-clock throughput).
    Bench(BenchArgs),
    /// One-command pipeline: train FT + adapters, extract ΔW, write all
    /// histogram and similarity CSVs.
    Repro(ReproArgs),
}

/// Run configuration: a config file, overridable by flags.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Adaptation method: ft | lora | multilora.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fixed step count (cycles the batch sequence).
    #[arg(long)]
    steps: Option<usize>,
    /// Adapter rank (r for multilora, R for lora).
    #[arg(long)]
    rank: Option<usize>,
    /// Number of parallel LoRA modules for multilora.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_text(&std::fs::read_to_string(path)?)?,
            None => {
                let method = self
                    .method
                    .as_deref()
                    .ok_or_else(|| Error::Argument("need --config or --method".into()))?;
                RunConfig::default_for(Method::parse(method)?)
            }
        };
        if let Some(m) = &self.method {
            let method = Method::parse(m)?;
            if method != cfg.method {
                // switching methods re-applies the method's default lr
                // unless --lr is also given
                let lr_was_default = cfg.lr == RunConfig::default_for(cfg.method).lr;
                cfg.method = method;
                if lr_was_default {
                    cfg.lr = RunConfig::default_for(method).lr;
                }
            }
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.steps_override = Some(s);
        }
        if let Some(r) = self.rank {
            cfg.rank = r;
            cfg.alpha = r as f64;
        }
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(b) = self.batch {
            cfg.batch = b;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for checkpoint.ckpt, loss.csv and the resolved config.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Also write the untrained starting checkpoint (initial.ckpt), the
    /// baseline for ΔW extraction.
    #[arg(long)]
    save_initial: bool,
}

#[derive(Args)]
struct MergeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Trained adapter checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output path for the merged plain-weight checkpoint.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Per-site ΔW (tuned − base), written as a checkpoint of deltas.
    Delta {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// −log10 singular-value histogram of one module's ΔW across layers.
    SvdHist {
        /// Delta checkpoint from `analyze delta`.
        #[arg(long)]
        input: PathBuf,
        /// Projection site name.
        #[arg(long)]
        module: Option<String>,
        /// Aggregation: mean | per-layer.
        #[arg(long, default_value = "mean")]
        agg: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// φ similarity grid between two ΔW checkpoints at one site.
    SubspaceSim {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value = "0")]
        layer: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
        max_rank: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pairwise sub-module similarity grids of a trained MultiLoRA run.
    PairwiseSim {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        module: Option<String>,
        #[arg(long, default_value = "0")]
        layer: usize,
        #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
        max_rank: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Sweep n over 1..=sweep_n at the config's rank.
    #[arg(long, default_value = "5")]
    sweep_n: usize,
    /// Also measure wall-clock tokens/sec (slow).
    #[arg(long)]
    measure: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    #[arg(long, default_value = "repro")]
    out_dir: PathBuf,
    #[arg(long, default_value = "0")]
    seed: u64,
    #[arg(long, default_value = "600")]
    steps: usize,
}

fn parse_module(name: Option<&str>) -> Result<Target> {
    let valid = Target::ALL.map(|t| t.name()).join(", ");
    match name {
        None => Err(Error::Argument(format!(
            "missing --module; valid projections: {valid}"
        ))),
        Some(n) => Target::parse(n).map_err(|_| {
            Error::Argument(format!(
                "unknown module {n:?}; valid projections: {valid}"
            ))
        }),
    }
}

/// All per-layer tensors of one module from a delta checkpoint, in layer
/// order.
fn module_deltas(ckpt: &Checkpoint, target: Target) -> Result<Vec<DenseMatrix>> {
    let mut out = Vec::new();
    for layer in 0.. {
        match ckpt.get(&Model::site_name(layer, target)) {
            Some(t) => out.push(t.clone()),
            None => break,
        }
    }
    if out.is_empty() {
        return Err(Error::Format(format!(
            "no tensors for module {} in the input checkpoint",
            target.name()
        )));
    }
    Ok(out)
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    std::fs::create_dir_all(&args.out_dir)?;
    eprintln!(
        "training method={} seed={} for {} epochs (steps override: {:?})",
        cfg.method.name(),
        cfg.seed,
        cfg.epochs,
        cfg.steps_override
    );
    if args.save_initial {
        save_checkpoint(&args.out_dir.join("initial.ckpt"), &initial_checkpoint(&cfg)?)?;
    }
    let outcome = run_train(&cfg)?;
    std::fs::write(args.out_dir.join("config.txt"), cfg.to_text())?;
    std::fs::write(args.out_dir.join("loss.csv"), loss_log_csv(&outcome.log))?;
    save_checkpoint(&args.out_dir.join("checkpoint.ckpt"), &outcome.checkpoint)?;
    eprintln!(
        "done: initial loss {:.4}, final loss {:.4}, wrote {}",
        outcome.initial_loss(),
        outcome.final_loss(),
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_merge(args: &MergeArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let merged = merge_from_checkpoint(&cfg, &ckpt)?;
    save_checkpoint(&args.out, &merged.checkpoint)?;
    eprintln!(
        "merged; max probe-logit deviation {:.3e}; wrote {}",
        merged.max_deviation,
        args.out.display()
    );
    Ok(())
}

fn cmd_analyze(sub: &AnalyzeCommand) -> Result<()> {
    match sub {
        AnalyzeCommand::Delta { base, tuned, out } => {
            let base = load_checkpoint(base)?;
            let tuned = load_checkpoint(tuned)?;
            let mut delta = Checkpoint::new(tuned.meta);
            let mut count = 0;
            for target in Target::ALL {
                for layer in 0.. {
                    let site = Model::site_name(layer, target);
                    if base.get(&site).is_none() || tuned.get(&site).is_none() {
                        break;
                    }
                    delta.insert(&site, delta_from_checkpoints(&base, &tuned, &site)?)?;
                    count += 1;
                }
            }
            if count == 0 {
                return Err(Error::Format(
                    "checkpoints share no projection-site tensors".into(),
                ));
            }
            save_checkpoint(out, &delta)?;
            eprintln!("wrote {count} site deltas to {}", out.display());
        }
        AnalyzeCommand::SvdHist {
            input,
            module,
            agg,
            out,
        } => {
            let target = parse_module(module.as_deref())?;
            let agg = match agg.as_str() {
                "mean" => Aggregation::Mean,
                "per-layer" => Aggregation::PerLayer,
                other => {
                    return Err(Error::Argument(format!(
                        "unknown --agg {other:?}; use mean or per-layer"
                    )))
                }
            };
            let deltas = module_deltas(&load_checkpoint(input)?, target)?;
            let hists = sv_histogram(&deltas, DEFAULT_BINS, agg)?;
            if agg == Aggregation::Mean {
                std::fs::write(out, hists[0].to_csv())?;
                eprintln!("wrote {}", out.display());
            } else {
                for (layer, h) in hists.iter().enumerate() {
                    let path = layer_suffixed(out, layer);
                    std::fs::write(&path, h.to_csv())?;
                    eprintln!("wrote {}", path.display());
                }
            }
        }
        AnalyzeCommand::SubspaceSim {
            a,
            b,
            module,
            layer,
            max_rank,
            out,
        } => {
            let target = parse_module(module.as_deref())?;
            let site = Model::site_name(*layer, target);
            let pick = |path: &Path| -> Result<DenseMatrix> {
                load_checkpoint(path)?
                    .get(&site)
                    .cloned()
                    .ok_or_else(|| Error::Format(format!("{}: no tensor {site}", path.display())))
            };
            let grid = similarity_grid_labeled(&pick(a)?, &pick(b)?, *max_rank, "a", "b", &site)?;
            std::fs::write(out, grid.to_csv())?;
            eprintln!("wrote {}", out.display());
        }
        AnalyzeCommand::PairwiseSim {
            config,
            checkpoint,
            module,
            layer,
            max_rank,
            out_dir,
        } => {
            let cfg = config.resolve()?;
            let target = parse_module(module.as_deref())?;
            let mut run = build_run(&cfg)?;
            load_into_params(&mut run.params, &load_checkpoint(checkpoint)?)?;
            let adapters = run.adapters.as_ref().ok_or_else(|| {
                Error::Argument("pairwise-sim needs a multilora config".into())
            })?;
            let Some(AdapterValues::Multi(multi)) =
                adapters.site_values(&run.params, *layer, target)
            else {
                return Err(Error::Argument(format!(
                    "no multilora adapter at layer {layer} site {}",
                    target.name()
                )));
            };
            let grids = pairwise_sublora_grid(&multi, *max_rank)?;
            std::fs::create_dir_all(out_dir)?;
            for (i, row) in grids.iter().enumerate() {
                for (j, grid) in row.iter().enumerate() {
                    let path = out_dir.join(format!("pairwise_{i}_{j}.csv"));
                    std::fs::write(&path, grid.to_csv())?;
                }
            }
            eprintln!("wrote {} grids to {}", grids.len() * grids.len(), out_dir.display());
        }
    }
    Ok(())
}

fn layer_suffixed(path: &Path, layer: usize) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("hist");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}_layer{layer}.{ext}"))
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    if args.sweep_n == 0 {
        return Err(Error::Argument("--sweep-n must be >= 1".into()));
    }
    let (d_in, d_out) = cfg.model.site_dims(cfg.targets[0]);
    let mut reports = Vec::new();
    for n in 1..=args.sweep_n {
        let mut sweep_cfg = cfg.clone();
        sweep_cfg.n = n;
        let mut report = cost_report(&sweep_cfg, d_in, d_out);
        if args.measure {
            report.wall_tokens_per_second = Some(measure_throughput(&sweep_cfg, 12, 2)?);
        }
        reports.push(report);
    }
    std::fs::write(&args.out, report_json(&reports)?)?;
    eprintln!("wrote {} reports to {}", reports.len(), args.out.display());
    Ok(())
}

fn cmd_repro(args: &ReproArgs) -> Result<()> {
    eprintln!(
        "repro: seed {} steps {} into {}",
        args.seed,
        args.steps,
        args.out_dir.display()
    );
    let report = run_repro(&args.out_dir, args.seed, args.steps)?;
    eprint!("{}", report.summary);
    eprintln!("wrote {} files to {}", report.files.len(), report.out_dir.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Merge(args) => cmd_merge(args),
        Command::Analyze { sub } => cmd_analyze(sub),
        Command::Bench(args) => cmd_bench(args),
        Command::Repro(args) => cmd_repro(args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Argument(_) | Error::State(_) => 2,
                Error::Format(_) | Error::Io(_) | Error::Shape(_) => 3,
                Error::Numeric(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}
