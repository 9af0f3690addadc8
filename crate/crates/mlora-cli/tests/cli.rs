//! End-to-end tests of the `mlora` binary: exit codes, file outputs, and
//! determinism across invocations.

use std::path::Path;
use std::process::{Command, Output};

fn mlora(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlora"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = "\
method = lora
d_model = 16
n_heads = 2
d_mid = 24
n_layers = 1
rank = 2
alpha = 2
n = 2
mix_choice = 8
mix_copy = 8
mix_arith = 8
mix_longgen = 8
mix_seed = 5
batch = 4
steps = 4
seed = 11
";

fn write_tiny(dir: &Path) {
    std::fs::write(dir.join("cfg.txt"), TINY).unwrap();
}

#[test]
fn train_is_deterministic_and_quiet_on_stdout() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path());
    for out_dir in ["a", "b"] {
        let out = mlora(
            &["train", "--config", "cfg.txt", "--out-dir", out_dir],
            dir.path(),
        );
        assert!(out.status.success(), "{}", stderr_of(&out));
        assert!(out.stdout.is_empty(), "data must go to files, not stdout");
    }
    let a = std::fs::read(dir.path().join("a/checkpoint.ckpt")).unwrap();
    let b = std::fs::read(dir.path().join("b/checkpoint.ckpt")).unwrap();
    assert_eq!(a, b, "same config+seed must give byte-identical checkpoints");
    let loss = std::fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss,lr\n"));
    assert_eq!(loss.lines().count(), 5);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = mlora(&["train", "--method", "bogus"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));

    write_tiny(dir.path());
    let out = mlora(
        &[
            "analyze",
            "svd-hist",
            "--input",
            "missing.ckpt",
            "--out",
            "h.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let msg = stderr_of(&out);
    for name in [
        "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj",
    ] {
        assert!(msg.contains(name), "error should list {name}: {msg}");
    }
}

#[test]
fn missing_file_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path());
    let out = mlora(
        &[
            "merge",
            "--config",
            "cfg.txt",
            "--checkpoint",
            "missing.ckpt",
            "--out",
            "m.ckpt",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr_of(&out));
}

#[test]
fn train_merge_delta_hist_sim_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    write_tiny(dir.path());
    let out = mlora(
        &[
            "train",
            "--config",
            "cfg.txt",
            "--out-dir",
            "run",
            "--save-initial",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = mlora(
        &[
            "merge",
            "--config",
            "cfg.txt",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--out",
            "merged.ckpt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = mlora(
        &[
            "analyze",
            "delta",
            "--base",
            "run/initial.ckpt",
            "--tuned",
            "merged.ckpt",
            "--out",
            "delta.ckpt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = mlora(
        &[
            "analyze",
            "svd-hist",
            "--input",
            "delta.ckpt",
            "--module",
            "q_proj",
            "--agg",
            "mean",
            "--out",
            "hist.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let hist = std::fs::read_to_string(dir.path().join("hist.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,count\n"));
    assert!(hist.trim_end().lines().last().unwrap().starts_with("zero_count,,"));

    // self-similarity: diagonal exactly 1 within tolerance
    let out = mlora(
        &[
            "analyze",
            "subspace-sim",
            "--a",
            "delta.ckpt",
            "--b",
            "delta.ckpt",
            "--module",
            "q_proj",
            "--max-rank",
            "5",
            "--out",
            "grid.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let grid = std::fs::read_to_string(dir.path().join("grid.csv")).unwrap();
    let mut lines = grid.lines();
    assert_eq!(lines.next(), Some("i,j,phi"));
    let mut diag = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let (i, j): (usize, usize) = (cells[0].parse().unwrap(), cells[1].parse().unwrap());
        let phi: f64 = cells[2].parse().unwrap();
        assert!((-1e-9..=1.0 + 1e-9).contains(&phi));
        if i == j {
            assert!((phi - 1.0).abs() < 1e-9, "phi({i},{i}) = {phi}");
            diag += 1;
        }
    }
    assert_eq!(diag, 5);
}

#[test]
fn pairwise_sim_on_multilora_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TINY.replace("method = lora", "method = multilora") + "lr = 5e-3\n";
    std::fs::write(dir.path().join("cfg.txt"), cfg).unwrap();
    let out = mlora(
        &["train", "--config", "cfg.txt", "--out-dir", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = mlora(
        &[
            "analyze",
            "pairwise-sim",
            "--config",
            "cfg.txt",
            "--checkpoint",
            "run/checkpoint.ckpt",
            "--module",
            "v_proj",
            "--max-rank",
            "3",
            "--out-dir",
            "pairwise",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    for i in 0..2 {
        for j in 0..2 {
            assert!(dir.path().join(format!("pairwise/pairwise_{i}_{j}.csv")).exists());
        }
    }
}

#[test]
fn bench_sweep_activation_column_linear_in_n() {
    let dir = tempfile::tempdir().unwrap();
    let out = mlora(
        &[
            "bench",
            "--method",
            "multilora",
            "--rank",
            "32",
            "--sweep-n",
            "5",
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr_of(&out));
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let reports: serde_json::Value = serde_json::from_str(&json).unwrap();
    let acts: Vec<u64> = reports
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["cached_activation_values_per_token_per_site"].as_u64().unwrap())
        .collect();
    assert_eq!(acts.len(), 5);
    let slope = acts[1] - acts[0];
    for w in acts.windows(2) {
        assert_eq!(w[1] - w[0], slope, "activation counter must be linear in n");
    }
    // matched budgets: multilora n·r FLOPs equal lora R = n·r
    let flops: Vec<u64> = reports
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["matmul_flops_per_token_per_site"].as_u64().unwrap())
        .collect();
    assert_eq!(flops[2], 3 * flops[0]);
}
