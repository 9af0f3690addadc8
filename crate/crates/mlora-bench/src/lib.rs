//! Shared setup for the criterion benches: small configs that finish a
//! training step in milliseconds while exercising the same code paths as
//! the desk-scale defaults.

use mlora_core::adapters::Method;
use mlora_core::pipeline::RunConfig;

pub fn bench_config(method: Method, n: usize, rank: usize) -> RunConfig {
    let mut cfg = RunConfig::default_for(method);
    cfg.model.d_model = 32;
    cfg.model.n_heads = 2;
    cfg.model.d_mid = 86;
    cfg.model.n_layers = 1;
    cfg.n = n;
    cfg.rank = rank;
    cfg.alpha = rank as f64;
    cfg.batch = 4;
    cfg.mixture.choice = 16;
    cfg.mixture.copy = 16;
    cfg.mixture.arith = 16;
    cfg.mixture.longgen = 16;
    cfg.steps_override = Some(1_000_000);
    cfg
}
