use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sensefs::simnet::scenario::generated_scenario;
use sensefs::sweep::{map_seeds, map_seeds_sequential, survey};

fn bench_sweep(c: &mut Criterion) {
    let text = generated_scenario(4, 10, 1);
    let seeds: Vec<u64> = (0..16).collect();
    let mut g = c.benchmark_group("survey_16_seeds");
    g.sample_size(10);
    g.bench_function("parallel", |b| {
        b.iter(|| map_seeds(black_box(&seeds), |s| survey(&text, s, 2_000).unwrap()))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| map_seeds_sequential(black_box(&seeds), |s| survey(&text, s, 2_000).unwrap()))
    });
    g.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
