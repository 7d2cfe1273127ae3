//! Sequential against rayon-backed execution of the hot loops.
//!
//! Within one build the `workers = 1` rows take the sequential path and the
//! others go through rayon. `cargo bench --no-default-features` builds the
//! library without rayon, where every row is sequential.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpatch_core::features::TokenList;
use vpatch_core::fuzzer::{mutate, run_campaign, CampaignConfig};
use vpatch_core::neuralnet::{ArchitectureConfig, Detector, Model};
use vpatch_core::par;
use vpatch_core::target::{generator, label_of, TargetSpec, Version};

fn worker_counts() -> Vec<usize> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut w = vec![1, 2, 4, n];
    w.sort_unstable();
    w.dedup();
    w
}

fn inputs(n: usize) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            let doc = generator::minimark_document(&mut rng, 8);
            mutate(&doc, &mut rng, &[], 4096).0
        })
        .collect()
}

fn execute(c: &mut Criterion) {
    let xs = inputs(2048);
    let target = TargetSpec::minimark(Version::V1);
    let mut g = c.benchmark_group("execute");
    g.throughput(Throughput::Elements(xs.len() as u64));
    for w in worker_counts() {
        g.bench_with_input(BenchmarkId::new("workers", w), &w, |b, &w| {
            b.iter(|| par::map_with_workers(w, &xs, |x| label_of(&target, x).unwrap()))
        });
    }
    g.finish();
}

fn predict(c: &mut Criterion) {
    let xs = inputs(256);
    let tokens = TokenList::new(Vec::new());
    let model = Model::init(&ArchitectureConfig::desk(), 500, &tokens, 3).unwrap();
    let det = Detector::new(model, tokens).unwrap();
    let mut g = c.benchmark_group("predict");
    g.throughput(Throughput::Elements(xs.len() as u64));
    for w in worker_counts() {
        g.bench_with_input(BenchmarkId::new("workers", w), &w, |b, &w| {
            b.iter(|| par::map_with_workers(w, &xs, |x| det.predict(x)))
        });
    }
    g.finish();
}

fn campaign(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seeds: Vec<Vec<u8>> = (0..4).map(|_| generator::minimark_document(&mut rng, 6)).collect();
    let mut g = c.benchmark_group("campaign");
    g.sample_size(10);
    g.throughput(Throughput::Elements(20_000));
    for w in worker_counts() {
        let mut cfg = CampaignConfig::new(TargetSpec::minimark(Version::V1), seeds.clone());
        cfg.max_executions = 20_000;
        cfg.workers = w;
        g.bench_with_input(BenchmarkId::new("workers", w), &cfg, |b, cfg| {
            b.iter(|| black_box(run_campaign(cfg).unwrap().log.unique))
        });
    }
    g.finish();
}

criterion_group!(benches, execute, predict, campaign);
criterion_main!(benches);
