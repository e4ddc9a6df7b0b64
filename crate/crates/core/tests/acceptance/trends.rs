//! Training-based criteria on the default synthetic corpus. Every seed
//! trains each variant once; the criteria read the shared results.

use std::sync::OnceLock;
use std::time::Instant;

use signspot_core::*;

use super::Outcome;

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    WatchReadLookup,
    WatchLookup,
    Infonce,
    Classification,
    FullVocab,
    Batch8,
    Batch32,
    Tau1,
}

impl Variant {
    const ALL: [Variant; 8] = [
        Variant::WatchReadLookup,
        Variant::WatchLookup,
        Variant::Infonce,
        Variant::Classification,
        Variant::FullVocab,
        Variant::Batch8,
        Variant::Batch32,
        Variant::Tau1,
    ];

    fn config(self, seed: u64) -> TrainConfig {
        let base = TrainConfig {
            seed,
            ..Default::default()
        };
        match self {
            Variant::WatchReadLookup => base,
            Variant::WatchLookup => TrainConfig {
                mode: LossMode::WatchLookup,
                ..base
            },
            Variant::Infonce => TrainConfig {
                mode: LossMode::Infonce,
                ..base
            },
            Variant::Classification => TrainConfig {
                mode: LossMode::Classification,
                ..base
            },
            Variant::FullVocab => TrainConfig {
                dict_vocab: DictVocab::FullVocab,
                ..base
            },
            Variant::Batch8 => TrainConfig { batch_size: 8, ..base },
            Variant::Batch32 => TrainConfig { batch_size: 32, ..base },
            Variant::Tau1 => TrainConfig { tau: 1.0, ..base },
        }
    }
}

pub struct SeedResult {
    pub seed: u64,
    pub random_map: f64,
    /// Unseen mAP per variant, in `Variant::ALL` order.
    pub unseen_map: Vec<f64>,
    pub loc_stride1: f64,
    pub loc_stride8: f64,
    pub base_train_secs: f64,
}

impl SeedResult {
    pub fn map(&self, v: Variant) -> f64 {
        self.unseen_map[Variant::ALL.iter().position(|&x| x == v).unwrap()]
    }
}

fn run_seed(seed: u64) -> SeedResult {
    let synth = generate(&SynthConfig {
        seed,
        ..Default::default()
    })
    .unwrap();
    let corpus = &synth.corpus;
    let unseen = EvalOptions::default();
    let mut unseen_map = Vec::new();
    let mut random_map = 0.0;
    let (mut loc_stride1, mut loc_stride8, mut base_train_secs) = (0.0, 0.0, 0.0);
    for v in Variant::ALL {
        let t = Instant::now();
        let out = train(corpus, &v.config(seed)).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let report = evaluate(corpus, &out.params, &unseen).unwrap();
        eprintln!("seed {seed} {v:?}: unseen mAP {:.4} (train {secs:.0}s)", report.map);
        unseen_map.push(report.map);
        if v == Variant::WatchReadLookup {
            random_map = report.random_map;
            base_train_secs = secs;
            let all = |stride| EvalOptions {
                split: EvalSplit::All,
                stride,
                ..Default::default()
            };
            loc_stride1 = evaluate(corpus, &out.params, &all(1)).unwrap().localization_accuracy;
            loc_stride8 = evaluate(corpus, &out.params, &all(8)).unwrap().localization_accuracy;
        }
    }
    SeedResult {
        seed,
        random_map,
        unseen_map,
        loc_stride1,
        loc_stride8,
        base_train_secs,
    }
}

pub fn results() -> &'static [SeedResult] {
    static CELL: OnceLock<Vec<SeedResult>> = OnceLock::new();
    CELL.get_or_init(|| SEEDS.iter().map(|&s| run_seed(s)).collect())
}

fn count(pred: impl Fn(&SeedResult) -> bool) -> usize {
    results().iter().filter(|r| pred(r)).count()
}

fn per_seed(f: impl Fn(&SeedResult) -> String) -> String {
    results().iter().map(|r| format!("s{}: {}", r.seed, f(r))).collect::<Vec<_>>().join("; ")
}

pub fn learnability() -> Outcome {
    let hits = count(|r| r.map(Variant::WatchReadLookup) >= 10.0 * r.random_map);
    let secs: f64 = results().iter().map(|r| r.base_train_secs).sum();
    Outcome::new(
        hits >= 4,
        format!(
            "{hits}/5 seeds reach 10x random; {}; training {secs:.0}s total",
            per_seed(|r| format!("{:.3} vs 10x{:.3}", r.map(Variant::WatchReadLookup), r.random_map))
        ),
    )
}

pub fn loss_ordering() -> Outcome {
    use Variant::*;
    let hits = count(|r| {
        r.map(Classification) < r.map(Infonce)
            && r.map(Infonce) <= r.map(WatchLookup)
            && r.map(WatchLookup) < r.map(WatchReadLookup)
    });
    Outcome::new(
        hits >= 4,
        format!(
            "{hits}/5 seeds ordered cls < infonce <= wl < wrl; {}",
            per_seed(|r| format!(
                "{:.3} {:.3} {:.3} {:.3}",
                r.map(Classification),
                r.map(Infonce),
                r.map(WatchLookup),
                r.map(WatchReadLookup)
            ))
        ),
    )
}

pub fn full_vocab() -> Outcome {
    let hits = count(|r| r.map(Variant::FullVocab) >= r.map(Variant::WatchReadLookup));
    Outcome::new(
        hits >= 4,
        format!(
            "{hits}/5 seeds full >= training vocabulary; {}",
            per_seed(|r| format!("{:.3} vs {:.3}", r.map(Variant::FullVocab), r.map(Variant::WatchReadLookup)))
        ),
    )
}

pub fn batch_and_temperature() -> Outcome {
    use Variant::*;
    let batch = count(|r| r.map(Batch8) <= r.map(Batch32) && r.map(Batch32) <= r.map(WatchReadLookup));
    let tau = count(|r| r.map(Tau1) < r.map(WatchReadLookup));
    Outcome::new(
        batch >= 3 && tau >= 3,
        format!(
            "batch 8<=32<=128 in {batch}/5, tau 1 < 0.07 in {tau}/5; {}",
            per_seed(|r| format!(
                "b {:.3} {:.3} {:.3} t1 {:.3}",
                r.map(Batch8),
                r.map(Batch32),
                r.map(WatchReadLookup),
                r.map(Tau1)
            ))
        ),
    )
}

pub fn stride() -> Outcome {
    let hits = count(|r| r.loc_stride1 >= r.loc_stride8);
    Outcome::new(
        hits == 5,
        format!(
            "{hits}/5 seeds stride 1 >= stride 8; {}",
            per_seed(|r| format!("{:.3} vs {:.3}", r.loc_stride1, r.loc_stride8))
        ),
    )
}
