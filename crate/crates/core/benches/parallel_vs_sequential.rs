//! Seed sweeps and market batches on one thread versus the rayon pool.

use std::hint::black_box;

use admissions_core::discrete::da_seed_sweep;
use admissions_core::equilibrium::solve_batch;
use admissions_core::{Execution, MarketParams};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn seed_sweep(c: &mut Criterion) {
    let market = MarketParams::pallet_town();
    let seeds: Vec<u64> = (0..32).collect();
    let mut group = c.benchmark_group("da_seed_sweep_n2000_32_seeds");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| da_seed_sweep(black_box(&market), 2000, &seeds, false, exec).unwrap())
        });
    }
    group.finish();
}

fn market_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let markets: Vec<MarketParams> = (0..2000)
        .map(|_| {
            let n = 50;
            let gamma = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
            let q = (0..n).map(|_| rng.random_range(0.0..0.04)).collect();
            MarketParams::new(gamma, q).unwrap()
        })
        .collect();
    let mut group = c.benchmark_group("solve_batch_2000_markets_50_schools");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| solve_batch(black_box(&markets), exec))
        });
    }
    group.finish();
}

criterion_group!(benches, seed_sweep, market_batch);
criterion_main!(benches);
