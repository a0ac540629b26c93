use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modscope::modularity::null_pvalue;
use modscope::partition::cluster_partition;
use modscope::planted::{planted_model, synth_planted_suite, PlantedConfig};
use modscope::predictivity::{bidirectional_ap, build_table};
use modscope::{Model, ModelConfig, PValueMode};

// Deterministic pseudo-random scores without pulling in an RNG crate.
fn scores(n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut x: u64 = 0x2545_F491_4F6C_DD1D;
    let mut s = Vec::with_capacity(n);
    let mut l = Vec::with_capacity(n);
    for i in 0..n {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        s.push((x >> 11) as f64 / (1u64 << 53) as f64);
        l.push((i % 2) as u8);
    }
    (s, l)
}

fn ap(c: &mut Criterion) {
    let mut g = c.benchmark_group("bidirectional_ap");
    for n in [100, 1000, 10_000] {
        let (s, l) = scores(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| bidirectional_ap(black_box(&s), black_box(&l))));
    }
    g.finish();
}

fn pvalue(c: &mut Criterion) {
    let mut g = c.benchmark_group("null_pvalue");
    for (name, mode) in [("binomial", PValueMode::BinomialApprox), ("exact", PValueMode::ExactSum)] {
        g.bench_function(name, |b| b.iter(|| null_pvalue(black_box(6), 256, 16, 3, 10, mode)));
    }
    g.finish();
}

fn clustering(c: &mut Criterion) {
    let m = Model::init(ModelConfig::dense(32, 1, 64, 512), 1).unwrap();
    c.bench_function("cluster_partition 512x64 into 32", |b| b.iter(|| cluster_partition(black_box(&m), 0, 32, 0, 50)));
}

fn table(c: &mut Criterion) {
    let cfg = PlantedConfig::single(8, vec![3, 11], 0);
    let (m, _) = planted_model(&cfg).unwrap();
    let (suite, _) = synth_planted_suite(&cfg, 0).unwrap();
    c.bench_function("build_table planted 8 sub-functions", |b| b.iter(|| build_table(black_box(&m), &suite, &[0, 1])));
}

criterion_group! {
    name = kernels;
    config = Criterion::default().sample_size(20);
    targets = ap, pvalue, clustering, table
}
criterion_main!(kernels);
