//! Sequential (`jobs = 1`) versus rayon (`jobs = 0`, all cores) for each
//! data-parallel stage. Built with `--no-default-features` both variants run
//! on the calling thread, which gives the fallback baseline.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use semergy_core::clustering::{cluster_dataset, Clusterer};
use semergy_core::scoring::{score_dataset, ScoreConfig};
use semergy_core::synth::{generate_config, ClusterPlan, RegimeSpec, SynthConfig};
use semergy_core::trace::{parse_trace_file_jobs, write_trace_file};

const MODES: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn workload(questions: usize) -> SynthConfig {
    SynthConfig::new(
        7,
        vec![
            RegimeSpec::new(ClusterPlan::MultiCluster, questions / 2, 10, 32),
            RegimeSpec::new(ClusterPlan::SingleClusterHighLogit, questions / 2, 10, 32).logits(15.0, 2.0),
        ],
    )
}

fn bench_synth(c: &mut Criterion) {
    let mut group = c.benchmark_group("synth");
    for questions in [200, 1000] {
        let config = workload(questions);
        group.throughput(Throughput::Elements(questions as u64));
        for (mode, jobs) in MODES {
            group.bench_with_input(BenchmarkId::new(mode, questions), &config, |b, cfg| {
                b.iter(|| generate_config(black_box(cfg), jobs).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_parse(c: &mut Criterion) {
    let mut group = c.benchmark_group("parse");
    group.sample_size(20);
    let dataset = generate_config(&workload(1000), 1).unwrap();
    let mut bytes = Vec::new();
    write_trace_file(&dataset, &mut bytes).unwrap();
    group.throughput(Throughput::Bytes(bytes.len() as u64));
    for (mode, jobs) in MODES {
        group.bench_function(mode, |b| {
            b.iter(|| parse_trace_file_jobs(black_box(&bytes[..]), jobs).unwrap())
        });
    }
    group.finish();
}

fn bench_cluster_and_score(c: &mut Criterion) {
    let mut group = c.benchmark_group("cluster_score");
    for questions in [200, 1000] {
        let dataset = generate_config(&workload(questions), 1).unwrap();
        let config = ScoreConfig::default();
        group.throughput(Throughput::Elements(questions as u64));
        for (mode, jobs) in MODES {
            group.bench_with_input(BenchmarkId::new(mode, questions), &dataset, |b, ds| {
                b.iter(|| {
                    let clusters = cluster_dataset(&ds.questions, Clusterer::Exact, jobs).unwrap();
                    score_dataset(&ds.questions, &clusters, &config, jobs).unwrap()
                })
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_synth, bench_parse, bench_cluster_and_score);
criterion_main!(benches);
