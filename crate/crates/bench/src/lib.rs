//! Input fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::Rng;
use signspot_core::rng;
use signspot_core::sampler::{build_minibatch, BatchOptions};
use signspot_core::training::BagIndices;
use signspot_core::{generate, LossMode, Minibatch, SynthConfig, SynthCorpus};

/// Uniform features in [-1, 1].
pub fn features(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut r = rng::stream(seed, "bench/features");
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-1.0..=1.0))
}

/// Random bags over `n_sims` similarities; positives index the lower half.
pub fn bags(n_sims: usize, n_anchors: usize, seed: u64) -> (Vec<BagIndices>, Vec<f64>) {
    let mut r = rng::stream(seed, "bench/bags");
    let sims = (0..n_sims).map(|_| r.random_range(-1.0..=1.0)).collect();
    let bags = (0..n_anchors)
        .map(|_| {
            let np = r.random_range(1..8);
            let half = n_sims / 2;
            let positives = (0..np).map(|_| r.random_range(0..half)).collect();
            let negatives = (0..n_sims / 4).map(|_| r.random_range(half..n_sims)).collect();
            BagIndices { positives, negatives }
        })
        .collect();
    (bags, sims)
}

/// A reduced synthetic corpus, quick to generate.
pub fn corpus() -> SynthCorpus {
    generate(&SynthConfig {
        num_sequences: 120,
        ..Default::default()
    })
    .expect("bench corpus")
}

pub fn batch(synth: &SynthCorpus, size: usize) -> Minibatch {
    let opts = BatchOptions {
        mode: LossMode::WatchReadLookup,
        ..Default::default()
    };
    build_minibatch(&synth.corpus, size, &opts, &mut rng::stream(0, "bench/batch")).expect("bench batch")
}
