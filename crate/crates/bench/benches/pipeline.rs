use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crossid_bench::scenario;
use crossid_core::association::{naive_baseline, score_tree, select_nodes};
use crossid_core::device_filter::{run_filter, FilterConfig};
use crossid_core::evaluation::rand_g_distinguishability;
use crossid_core::linkage_tree::{build_tree, candidate_nodes};
use crossid_core::simulate::random_attendance;
use crossid_core::ContextMetric;

fn filter(c: &mut Criterion) {
    let (sim, _) = scenario(50, 100, 1);
    let config = FilterConfig::default();
    c.bench_function("filter/50x100", |b| {
        b.iter(|| run_filter(black_box(&sim.dataset), &sim.oui, &config).unwrap())
    });
}

fn tree(c: &mut Criterion) {
    let mut group = c.benchmark_group("build_tree");
    for victims in [10, 20, 40] {
        let (sim, _) = scenario(victims, 60, 2);
        let n = sim.dataset.samples.len();
        group.bench_with_input(BenchmarkId::from_parameter(n), &sim, |b, sim| {
            b.iter(|| build_tree(black_box(&sim.dataset.samples), &sim.dataset.sessions).unwrap())
        });
    }
    group.finish();
}

fn association(c: &mut Criterion) {
    let mut group = c.benchmark_group("associate");
    group.sample_size(10);
    let (_, prepared) = scenario(20, 60, 3);
    let tree = &prepared.tree;
    let candidates = candidate_nodes(tree, 1);
    for metric in [ContextMetric::Dice, ContextMetric::Euclidean] {
        let scores = score_tree(tree, &candidates, &prepared.device_contexts, metric, 0.5).unwrap();
        group.bench_function(BenchmarkId::new("select_nodes", format!("{metric:?}")), |b| {
            b.iter(|| select_nodes(tree, black_box(&scores), 25).unwrap())
        });
    }
    group.bench_function("naive", |b| {
        b.iter(|| naive_baseline(tree, black_box(&prepared.device_contexts), 25, ContextMetric::Dice).unwrap())
    });
    group.finish();
}

fn feasibility(c: &mut Criterion) {
    let rows = random_attendance(22, 120, [0.2, 0.8], 5).unwrap();
    c.bench_function("rand_g/22x120/g=10", |b| {
        b.iter(|| rand_g_distinguishability(black_box(&rows), 10, 20, 5).unwrap())
    });
}

criterion_group!(benches, filter, tree, association, feasibility);
criterion_main!(benches);
