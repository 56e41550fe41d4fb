use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mftg_bench::game;
use mftg_core::{solve, Family};
use std::hint::black_box;

fn backward_recursion(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve");
    for family in [Family::Deterministic2p, Family::AdditiveVariance2p] {
        for agents in [2, 4, 8] {
            let s = game(family, agents, 100, 2);
            group.bench_with_input(
                BenchmarkId::new(family.config_name(), format!("{agents} agents")),
                &s,
                |b, s| b.iter(|| solve(black_box(s)).unwrap()),
            );
        }
    }
    group.finish();
}

fn horizon_scaling(c: &mut Criterion) {
    let mut group = c.benchmark_group("solve_horizon");
    for horizon in [10, 100, 1000] {
        let s = game(Family::MultiplicativeVariance2p, 2, horizon, 3);
        group.bench_with_input(BenchmarkId::from_parameter(horizon), &s, |b, s| {
            b.iter(|| solve(black_box(s)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, backward_recursion, horizon_scaling);
criterion_main!(benches);
