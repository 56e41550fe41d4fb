use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mftg_bench::game;
use mftg_core::{run_ensemble_with, solve, EnsembleOptions, Family};
use std::hint::black_box;

fn monte_carlo(c: &mut Criterion) {
    let s = game(Family::AdditiveVariance2p, 2, 10, 2);
    let (_, gains) = solve(&s).unwrap();
    let opts = EnsembleOptions {
        storage_cap: 0,
        ..EnsembleOptions::default()
    };
    let mut group = c.benchmark_group("ensemble");
    group.sample_size(20);
    for paths in [1_000u64, 10_000, 100_000] {
        group.throughput(Throughput::Elements(paths));
        group.bench_with_input(BenchmarkId::from_parameter(paths), &paths, |b, &paths| {
            b.iter(|| run_ensemble_with(black_box(&s), &gains, paths, 42, opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, monte_carlo);
criterion_main!(benches);
