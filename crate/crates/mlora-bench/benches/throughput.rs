//! Wall-clock comparisons the analytic counters predict: adapter training
//! step times across methods and n, and the SVD used by the analysis suite.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mlora_bench::bench_config;
use mlora_core::adapters::Method;
use mlora_core::numlin::{kaiming_uniform, svd, Rng};
use mlora_core::pipeline::Trainer;

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let cases = [
        ("ft", Method::Ft, 1, 8),
        ("lora_r24", Method::Lora, 1, 24),
        ("multilora_n3_r8", Method::MultiLora, 3, 8),
    ];
    for (name, method, n, rank) in cases {
        group.bench_function(name, |b| {
            let mut trainer = Trainer::new(&bench_config(method, n, rank)).unwrap();
            b.iter(|| black_box(trainer.step().unwrap()));
        });
    }
    group.finish();
}

fn multilora_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("multilora_step_vs_n");
    group.sample_size(10);
    for n in [1usize, 2, 3, 4, 5] {
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            let mut trainer = Trainer::new(&bench_config(Method::MultiLora, n, 8)).unwrap();
            b.iter(|| black_box(trainer.step().unwrap()));
        });
    }
    group.finish();
}

fn svd_64(c: &mut Criterion) {
    let mut rng = Rng::new(7);
    let m = kaiming_uniform(&mut rng, 64, 64, 64).unwrap();
    c.bench_function("svd_64x64", |b| b.iter(|| black_box(svd(&m).unwrap())));
}

criterion_group!(benches, train_step, multilora_scaling, svd_64);
criterion_main!(benches);
