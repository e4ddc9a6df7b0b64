use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use signspot_bench as fx;
use signspot_core::bags::build_bags;
use signspot_core::rng;
use signspot_core::spotting::{embed_entry, embed_sequence, spot};
use signspot_core::training::mil_nce;
use signspot_core::{BagOptions, LossMode, ModelParams, MODEL_DIMS};

fn mlp(c: &mut Criterion) {
    let params = ModelParams::init(MODEL_DIMS, &mut rng::stream(0, "init"));
    let mut g = c.benchmark_group("mlp");
    for rows in [64, 512] {
        let x = fx::features(rows, MODEL_DIMS[0], 1);
        g.bench_with_input(BenchmarkId::new("forward", rows), &x, |b, x| b.iter(|| params.forward(black_box(x.view()))));
        g.bench_with_input(BenchmarkId::new("forward_backward", rows), &x, |b, x| {
            b.iter(|| {
                let (out, cache) = params.forward_cached(x.clone());
                params.backward(&cache, out.view(), false)
            })
        });
    }
    g.finish();
}

fn loss(c: &mut Criterion) {
    let (bags, sims) = fx::bags(20_000, 400, 2);
    c.bench_function("mil_nce/400x20000", |b| b.iter(|| mil_nce(black_box(&bags), black_box(&sims), 0.07)));
}

fn bag_building(c: &mut Criterion) {
    let synth = fx::corpus();
    let opts = BagOptions::default();
    let mut g = c.benchmark_group("bags");
    for size in [8, 32] {
        let batch = fx::batch(&synth, size);
        g.bench_with_input(BenchmarkId::new("watch_read_lookup", size), &batch, |b, batch| {
            b.iter(|| build_bags(black_box(batch), LossMode::WatchReadLookup, &opts))
        });
    }
    g.finish();
}

fn spotting(c: &mut Criterion) {
    let synth = fx::corpus();
    let params = ModelParams::init(MODEL_DIMS, &mut rng::stream(0, "init"));
    let seq = &synth.corpus.continuous()[0];
    let entry = &synth.corpus.dictionary()[0];
    let variants = embed_entry(&params, entry);
    let mut g = c.benchmark_group("spot");
    for stride in [1, 8] {
        g.bench_with_input(BenchmarkId::new("sequence", stride), &stride, |b, &stride| {
            b.iter(|| {
                let emb = embed_sequence(&params, seq, stride).unwrap();
                spot(&emb, variants.view(), entry.word)
            })
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = mlp, loss, bag_building, spotting
}
criterion_main!(benches);
