//! Analytic FLOP and activation-memory counters plus informational
//! wall-clock throughput. The counters are exact functions of the config;
//! the wall-clock number depends on the machine and is never asserted.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::Method;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{build_run, RunConfig, Trainer};

/// Per-site cost counters for one adapter configuration. The integer
/// fields are derived from the config, not measured; only
/// `wall_tokens_per_second` comes from a clock.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CostReport {
    pub method: String,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub n: usize,
    pub matmul_flops_per_token_per_site: usize,
    pub adapter_overhead_flops: usize,
    pub cached_activation_values_per_token_per_site: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_tokens_per_second: Option<f64>,
}

/// Adapter matmul FLOPs per token per site, plus elementwise overhead.
/// LoRA(R): 2·d_in·R + 2·R·d_out. MultiLoRA(n, r): n·(2·d_in·r + 2·r·d_out)
/// matmul plus (2n−1)·d_out overhead (n scalings and n−1 additions).
pub fn flop_count(method: Method, d_in: usize, d_out: usize, rank: usize, n: usize) -> (usize, usize) {
    match method {
        Method::Ft => (0, 0),
        Method::Lora => (2 * d_in * rank + 2 * rank * d_out, 0),
        Method::MultiLora => (
            n * (2 * d_in * rank + 2 * rank * d_out),
            (2 * n - 1) * d_out,
        ),
    }
}

/// Values cached for the backward pass, per token per site. LoRA keeps the
/// rank-R intermediate x·A; MultiLoRA keeps each x·A_i and each pre-scaling
/// module output (needed for the scaling gradient): n·(r + d_out).
pub fn activation_count(method: Method, d_out: usize, rank: usize, n: usize) -> usize {
    match method {
        Method::Ft => 0,
        Method::Lora => rank,
        Method::MultiLora => n * (rank + d_out),
    }
}

pub fn cost_report(cfg: &RunConfig, d_in: usize, d_out: usize) -> CostReport {
    let (matmul, overhead) = flop_count(cfg.method, d_in, d_out, cfg.rank, cfg.n);
    CostReport {
        method: cfg.method.name().to_string(),
        d_in,
        d_out,
        rank: cfg.rank,
        n: cfg.n,
        matmul_flops_per_token_per_site: matmul,
        adapter_overhead_flops: overhead,
        cached_activation_values_per_token_per_site: activation_count(
            cfg.method, d_out, cfg.rank, cfg.n,
        ),
        wall_tokens_per_second: None,
    }
}

/// Count the adapter tensors a real forward pass logs as cached at one
/// site, per token. Must equal `activation_count` for every config.
pub fn instrumented_activation_count(cfg: &RunConfig) -> Result<usize> {
    let run = build_run(cfg)?;
    let adapters = run
        .adapters
        .as_ref()
        .ok_or_else(|| Error::Argument("full fine-tuning caches no adapter tensors".into()))?;
    let (layer, target) = adapters.site_list()[0];
    let site = Model::site_name(layer, target);
    let mut tape = Tape::new();
    let ids = [2usize, 3, 4, 5];
    run.model
        .forward_loss(&run.params, &mut tape, &ids, None, Some(adapters))?;
    tape.cached_values_per_token(&site)
        .ok_or_else(|| Error::State(format!("no cache log recorded for site {site}")))
}

/// Wall-clock training throughput in tokens/second, excluding `warmup`
/// steps, measured over the following `steps − warmup` steps.
pub fn measure_throughput(cfg: &RunConfig, steps: usize, warmup: usize) -> Result<f64> {
    if steps <= warmup {
        return Err(Error::Argument(format!(
            "measure_throughput: steps {steps} must exceed warmup {warmup}"
        )));
    }
    let mut measure_cfg = cfg.clone();
    measure_cfg.steps_override = Some(steps);
    let mut trainer = Trainer::new(&measure_cfg)?;
    for _ in 0..warmup {
        trainer.step()?;
    }
    let start = Instant::now();
    let mut tokens = 0usize;
    for _ in warmup..steps {
        let (_, t) = trainer.step()?;
        tokens += t;
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed <= 0.0 {
        return Err(Error::Numeric("measured interval too short to time".into()));
    }
    Ok(tokens as f64 / elapsed)
}

pub fn report_json(reports: &[CostReport]) -> Result<String> {
    serde_json::to_string_pretty(reports)
        .map_err(|e| Error::Format(format!("cost report serialization: {e}")))
}
