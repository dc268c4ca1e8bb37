//! One thread against the default pool for the parallel hot paths. Build
//! with `--no-default-features` to time the sequential fallback instead.

use bce_core::config::{CompareConfig, RunConfig};
use bce_core::eval::compare;
use bce_core::features::{knn_graph, spectral_embedding, Setting};
use bce_core::par::with_threads;
use bce_core::pipeline::{run, Mode, PipelineConfig};
use bce_core::scenario::{generate, Degradation, ScenarioConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};

const POOLS: [(&str, usize); 2] = [("1-thread", 1), ("default", 0)];

fn degraded(epochs: usize) -> ScenarioConfig {
    ScenarioConfig {
        epochs,
        degradation: Degradation { fraction: 0.3, inflation: 10.0, offset: 5.0, ..Default::default() },
        ..Default::default()
    }
}

fn embedding(c: &mut Criterion) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("knn_embedding");
    for n in [250usize, 1500] {
        let data = DMatrix::from_fn(n, 4, |_, _| rng.random_range(-1.0..1.0));
        for (name, threads) in POOLS {
            group.bench_with_input(BenchmarkId::new(name, n), &data, |b, data| {
                b.iter(|| {
                    with_threads(threads, || {
                        let g = knn_graph(data, 10, Setting::AUTO).unwrap();
                        spectral_embedding(&g, 4).unwrap()
                    })
                })
            });
        }
    }
    group.finish();
}

fn pipeline(c: &mut Criterion) {
    let scenario = generate(&degraded(60)).unwrap();
    let cfg = PipelineConfig { mode: Mode::BceAd, ..Default::default() };
    let mut group = c.benchmark_group("pipeline_bce_ad");
    group.sample_size(10);
    for (name, threads) in POOLS {
        group.bench_function(name, |b| b.iter(|| with_threads(threads, || run(&scenario.observations, &cfg).unwrap())));
    }
    group.finish();
}

fn comparison(c: &mut Criterion) {
    let cfg = RunConfig {
        scenario: degraded(30),
        pipeline: PipelineConfig { max_outer: 3, ..Default::default() },
        compare: CompareConfig { modes: vec![Mode::L2, Mode::Bce, Mode::BceAd], seeds: (0..4).collect() },
    };
    let mut group = c.benchmark_group("compare");
    group.sample_size(10);
    for (name, threads) in POOLS {
        group.bench_function(name, |b| b.iter(|| compare(&cfg, threads).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, embedding, pipeline, comparison);
criterion_main!(benches);
