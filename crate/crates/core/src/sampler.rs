//! Subtitle tokenization, foreground/background window sampling, dictionary
//! subclip index generation and minibatch assembly.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, SequenceSplit, Vocabulary, WordId, WordSplit, WINDOW_FRAMES};
use crate::error::{Error, Result};

/// Background clips drawn per sequence.
pub const BACKGROUND_CLIPS: usize = 10;
/// Foreground window start range relative to the annotation frame.
pub const FOREGROUND_OFFSETS: (i64, i64) = (-20, -10);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    WatchReadLookup,
    WatchLookup,
    Infonce,
    Classification,
}

impl LossMode {
    pub fn uses_subtitles(self) -> bool {
        matches!(self, LossMode::WatchReadLookup)
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "watch-read-lookup" | "wrl" => Ok(LossMode::WatchReadLookup),
            "watch-lookup" | "wl" => Ok(LossMode::WatchLookup),
            "infonce" => Ok(LossMode::Infonce),
            "classification" => Ok(LossMode::Classification),
            _ => Err(Error::InvalidConfig(format!("unknown mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::WatchReadLookup => "watch-read-lookup",
            LossMode::WatchLookup => "watch-lookup",
            LossMode::Infonce => "infonce",
            LossMode::Classification => "classification",
        })
    }
}

/// Which dictionary words may be looked up for background subtitle words.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DictVocab {
    TrainingVocab,
    FullVocab,
}

impl std::str::FromStr for DictVocab {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "training-vocab" | "training" => Ok(DictVocab::TrainingVocab),
            "full-vocab" | "full" => Ok(DictVocab::FullVocab),
            _ => Err(Error::InvalidConfig(format!("unknown dictionary vocabulary `{s}`"))),
        }
    }
}

impl std::fmt::Display for DictVocab {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DictVocab::TrainingVocab => "training-vocab",
            DictVocab::FullVocab => "full-vocab",
        })
    }
}

fn normalize(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// In-vocabulary words of a subtitle, lowercased with surrounding punctuation
/// removed. A possessive `'s` falls back to its stem.
pub fn tokenize(subtitle: &[String], vocab: &Vocabulary) -> BTreeSet<WordId> {
    let mut out = BTreeSet::new();
    for token in subtitle {
        let word = normalize(token);
        if let Some(id) = vocab.lookup(&word) {
            out.insert(id);
            continue;
        }
        for suffix in ["'s", "\u{2019}s"] {
            if let Some(stem) = word.strip_suffix(suffix) {
                if let Some(id) = vocab.lookup(stem) {
                    out.insert(id);
                }
            }
        }
    }
    out
}

/// Start of the 16-frame foreground clip, uniform over
/// `[t - 20, t - 10]` and clamped into the sequence.
pub fn sample_foreground_start<R: Rng + ?Sized>(t: u32, seq_windows: usize, rng: &mut R) -> usize {
    let (lo, hi) = FOREGROUND_OFFSETS;
    let s = i64::from(t) + rng.random_range(lo..=hi);
    s.clamp(0, seq_windows.saturating_sub(1) as i64) as usize
}

/// Window starts whose 16-frame span does not intersect the foreground clip,
/// drawn without replacement; all of them when fewer than `count` exist.
pub fn sample_background_starts<R: Rng + ?Sized>(
    seq_windows: usize,
    fg_start: usize,
    count: usize,
    rng: &mut R,
) -> Vec<usize> {
    let valid: Vec<usize> = (0..seq_windows)
        .filter(|&s| s + WINDOW_FRAMES <= fg_start || s >= fg_start + WINDOW_FRAMES)
        .collect();
    if valid.len() <= count {
        return valid;
    }
    let mut picked: Vec<usize> = valid.choose_multiple(rng, count).copied().collect();
    picked.sort_unstable();
    picked
}

/// Frame indices for `n = max(1, round(num_frames / 16))` dictionary subclips,
/// each resampled at a random rate in `[0.5, 1.5]` with a random shift.
pub fn dictionary_subclip_indices<R: Rng + ?Sized>(num_frames: usize, rng: &mut R) -> Vec<Vec<usize>> {
    assert!(num_frames >= 1, "dictionary video must have frames");
    let n = ((num_frames as f64 / WINDOW_FRAMES as f64).round() as usize).max(1);
    let last = (num_frames - 1) as f64;
    (0..n)
        .map(|_| {
            let rate: f64 = rng.random_range(0.5..=1.5);
            let span = WINDOW_FRAMES as f64 / rate;
            let max_shift = (num_frames as f64 - span).max(0.0);
            let shift = rng.random_range(0.0..=max_shift);
            (0..WINDOW_FRAMES)
                .map(|k| (shift + k as f64 / rate).round().clamp(0.0, last) as usize)
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    /// Index into `Corpus::continuous`.
    pub seq: usize,
    pub seq_id: String,
    pub fg_window: usize,
    pub fg_word: WordId,
    pub bg_windows: Vec<usize>,
    /// Variant indices of the foreground word's dictionary entry.
    pub fg_dict: Vec<usize>,
    pub bg_dict: BTreeMap<WordId, Vec<usize>>,
    pub subtitle_tokens: BTreeSet<WordId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minibatch {
    pub items: Vec<BatchItem>,
}

impl Minibatch {
    /// Distinct dictionary videos referenced by the batch, in (word, variant) order.
    pub fn dictionary_videos(&self) -> BTreeSet<(WordId, usize)> {
        let mut out = BTreeSet::new();
        for item in &self.items {
            out.extend(item.fg_dict.iter().map(|&v| (item.fg_word, v)));
            for (&w, vs) in &item.bg_dict {
                out.extend(vs.iter().map(|&v| (w, v)));
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchOptions {
    pub mode: LossMode,
    pub class_balanced: bool,
    pub dict_vocab: DictVocab,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            mode: LossMode::WatchReadLookup,
            class_balanced: true,
            dict_vocab: DictVocab::TrainingVocab,
        }
    }
}

/// Training sequences usable as foreground items: annotated, in the train
/// split, annotated with a seen word.
pub fn training_pool(corpus: &Corpus) -> Vec<usize> {
    corpus
        .continuous()
        .iter()
        .enumerate()
        .filter(|(_, s)| {
            s.split == SequenceSplit::Train
                && s.annotation
                    .is_some_and(|a| corpus.split_tag(a.word) == WordSplit::SeenTrain)
        })
        .map(|(i, _)| i)
        .collect()
}

fn all_variants(corpus: &Corpus, word: WordId) -> Vec<usize> {
    corpus
        .dictionary_entry(word)
        .map(|e| (0..e.variants.len()).collect())
        .unwrap_or_default()
}

/// Materializes one batch item for an annotated sequence.
pub fn build_item<R: Rng + ?Sized>(
    corpus: &Corpus,
    seq_index: usize,
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<BatchItem> {
    let seq = &corpus.continuous()[seq_index];
    let ann = seq
        .annotation
        .ok_or_else(|| Error::Contract(format!("sequence `{}` has no annotation", seq.id)))?;
    let fg_window = sample_foreground_start(ann.frame, seq.num_windows(), rng);
    let bg_windows = sample_background_starts(seq.num_windows(), fg_window, BACKGROUND_CLIPS, rng);
    let mut subtitle_tokens = tokenize(&seq.subtitle, corpus.vocabulary());
    subtitle_tokens.insert(ann.word);
    let bg_dict = if opts.mode.uses_subtitles() {
        subtitle_tokens
            .iter()
            .copied()
            .filter(|&w| w != ann.word)
            .filter(|&w| {
                opts.dict_vocab == DictVocab::FullVocab
                    || corpus.split_tag(w) == WordSplit::SeenTrain
            })
            .map(|w| (w, all_variants(corpus, w)))
            .filter(|(_, v)| !v.is_empty())
            .collect()
    } else {
        BTreeMap::new()
    };
    Ok(BatchItem {
        seq: seq_index,
        seq_id: seq.id.clone(),
        fg_window,
        fg_word: ann.word,
        bg_windows,
        fg_dict: all_variants(corpus, ann.word),
        bg_dict,
        subtitle_tokens,
    })
}

pub fn build_batch_from<R: Rng + ?Sized>(
    corpus: &Corpus,
    seq_indices: &[usize],
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<Minibatch> {
    let items = seq_indices
        .iter()
        .map(|&i| build_item(corpus, i, opts, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Minibatch { items })
}

/// Draws `batch_size` training sequences (distinct foreground words when
/// class-balanced) and materializes them.
pub fn build_minibatch<R: Rng + ?Sized>(
    corpus: &Corpus,
    batch_size: usize,
    opts: &BatchOptions,
    rng: &mut R,
) -> Result<Minibatch> {
    let mut pool = training_pool(corpus);
    pool.shuffle(rng);
    let chosen: Vec<usize> = if opts.class_balanced {
        let mut seen = BTreeSet::new();
        let picked: Vec<usize> = pool
            .iter()
            .copied()
            .filter(|&i| seen.insert(corpus.continuous()[i].annotation.unwrap().word))
            .take(batch_size)
            .collect();
        if picked.len() < batch_size {
            return Err(Error::InsufficientWords {
                needed: batch_size,
                available: picked.len(),
            });
        }
        picked
    } else {
        if pool.len() < batch_size {
            return Err(Error::Contract(format!(
                "batch of {batch_size} requested from {} annotated sequences",
                pool.len()
            )));
        }
        pool.truncate(batch_size);
        pool
    };
    build_batch_from(corpus, &chosen, opts, rng)
}

/// Partitions a shuffled pool into batches of at most `batch_size`. Under
/// class balancing a sequence whose word is already in the open batch is
/// deferred to a later batch, so foreground words stay pairwise distinct.
pub fn plan_epoch<R: Rng + ?Sized>(
    corpus: &Corpus,
    pool: &[usize],
    batch_size: usize,
    class_balanced: bool,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order = pool.to_vec();
    order.shuffle(rng);
    if !class_balanced {
        return order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    }
    let word = |i: usize| corpus.continuous()[i].annotation.map(|a| a.word);
    let mut batches = Vec::new();
    let mut pending = order;
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut words = BTreeSet::new();
        let mut rest = Vec::new();
        for i in pending {
            if batch.len() < batch_size && words.insert(word(i)) {
                batch.push(i);
            } else {
                rest.push(i);
            }
        }
        batches.push(batch);
        pending = rest;
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Annotation, ContinuousSequence, DictionaryEntry, FeatureSeries, FEATURE_DIM};
    use crate::rng;

    fn strings(words: &[&str]) -> Vec<String> {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenize_caption_example() {
        let vocab = Vocabulary::new(["name", "what", "friend"]).unwrap();
        let got = tokenize(&strings(&["what", "is", "your", "friend's", "name?"]), &vocab);
        let want: BTreeSet<_> = ["name", "what", "friend"]
            .iter()
            .map(|w| vocab.lookup(w).unwrap())
            .collect();
        assert_eq!(got, want);
        assert!(tokenize(&strings(&["the", "cat"]), &vocab).is_empty());
        assert_eq!(tokenize(&strings(&["Name", "name"]), &vocab).len(), 1);
    }

    #[test]
    fn foreground_draws_are_uniform() {
        // Chi-squared goodness of fit over the 11 admissible starts; the 0.999
        // quantile of chi2(10) is 29.59.
        let mut rng = rng::stream(11, "test");
        let mut hist = [0usize; 11];
        let n = 100_000;
        for _ in 0..n {
            let s = sample_foreground_start(100, 1000, &mut rng);
            assert!((80..=90).contains(&s));
            hist[s - 80] += 1;
        }
        let expected = n as f64 / 11.0;
        let chi2: f64 = hist.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 29.59, "chi2 = {chi2}");
    }

    #[test]
    fn foreground_clamps_and_repeats() {
        let mut rng = rng::stream(1, "test");
        for _ in 0..100 {
            assert_eq!(sample_foreground_start(5, 100, &mut rng), 0);
        }
        let a: Vec<_> = (0..20).map(|_| sample_foreground_start(50, 100, &mut rng::stream(4, "x"))).collect();
        let mut r1 = rng::stream(4, "x");
        let mut r2 = rng::stream(4, "x");
        let b: Vec<_> = (0..20).map(|_| sample_foreground_start(50, 100, &mut r1)).collect();
        let c: Vec<_> = (0..20).map(|_| sample_foreground_start(50, 100, &mut r2)).collect();
        assert_eq!(b, c);
        assert!(a.iter().all(|s| (30..=40).contains(s)));
    }

    #[test]
    fn background_avoids_foreground_span() {
        for seed in 0..200 {
            let mut rng = rng::stream(seed, "bg");
            let starts = sample_background_starts(200, 80, 10, &mut rng);
            assert_eq!(starts.len(), 10);
            // Exhaustive overlap check against the foreground span [80, 95].
            for &s in &starts {
                assert!(!(65..=95).contains(&s), "start {s} overlaps");
                assert!((s..s + 16).all(|f| !(80..96).contains(&f)));
            }
            let set: BTreeSet<_> = starts.iter().collect();
            assert_eq!(set.len(), 10);
        }
    }

    #[test]
    fn background_short_sequence() {
        // The valid set for 40 windows with the foreground at 0 is exactly [16, 39].
        let valid: Vec<usize> = (0..40).filter(|&s| s >= 16).collect();
        let starts = sample_background_starts(40, 0, 10, &mut rng::stream(0, "bg"));
        assert_eq!(starts.len(), 10);
        assert!(starts.iter().all(|s| valid.contains(s)));
        // With count above the valid set size everything is returned.
        let all = sample_background_starts(20, 0, 10, &mut rng::stream(0, "bg"));
        assert_eq!(all, vec![16, 17, 18, 19]);
        let a = sample_background_starts(200, 80, 10, &mut rng::stream(5, "bg"));
        let b = sample_background_starts(200, 80, 10, &mut rng::stream(5, "bg"));
        assert_eq!(a, b);
    }

    #[test]
    fn subclip_indices_shape() {
        let mut rng = rng::stream(2, "sub");
        for _ in 0..200 {
            let lists = dictionary_subclip_indices(56, &mut rng);
            assert_eq!(lists.len(), 4);
            for l in &lists {
                assert_eq!(l.len(), 16);
                assert!(l.iter().all(|&i| i <= 55));
                assert!(l.windows(2).all(|w| w[0] <= w[1]));
            }
            let short = dictionary_subclip_indices(8, &mut rng);
            assert_eq!(short.len(), 1);
            assert!(short[0].iter().all(|&i| i <= 7));
            assert!(short[0].windows(2).all(|w| w[0] <= w[1]));
        }
    }

    fn series(rows: usize) -> FeatureSeries {
        FeatureSeries::new(rows, vec![0.0; rows * FEATURE_DIM]).unwrap()
    }

    /// Fig. A.3-style corpus: "what is your friend's name?" annotated with
    /// friend, and a second sequence about speaking a language.
    pub(crate) fn figure_corpus() -> Corpus {
        let vocab = Vocabulary::new(["friend", "name", "what", "language", "speak"]).unwrap();
        let seq = |id: &str, subtitle: &[&str], word: u32| ContinuousSequence {
            id: id.into(),
            features: series(120),
            subtitle: strings(subtitle),
            annotation: Some(Annotation {
                word: WordId(word),
                frame: 60,
                confidence: 0.9,
            }),
            split: SequenceSplit::Train,
        };
        let continuous = vec![
            seq("s1", &["what", "is", "your", "friend's", "name?"], 0),
            seq("s2", &["do", "you", "speak", "sign", "language"], 3),
        ];
        let dictionary = (0..5)
            .map(|w| DictionaryEntry {
                word: WordId(w),
                variants: (0..(w as usize % 3 + 1)).map(|_| series(3)).collect(),
            })
            .collect();
        Corpus::new(vocab, continuous, dictionary).unwrap()
    }

    #[test]
    fn background_dictionary_excludes_foreground() {
        let corpus = figure_corpus();
        let opts = BatchOptions::default();
        let item = build_item(&corpus, 0, &opts, &mut rng::stream(0, "b")).unwrap();
        let keys: Vec<&str> = item.bg_dict.keys().map(|w| corpus.vocabulary().word(*w)).collect();
        assert_eq!(keys, vec!["name", "what"]);
        assert_eq!(item.fg_dict, vec![0]);
        assert_eq!(item.bg_windows.len(), 10);
        let wl = BatchOptions {
            mode: LossMode::WatchLookup,
            ..opts
        };
        assert!(build_item(&corpus, 0, &wl, &mut rng::stream(0, "b")).unwrap().bg_dict.is_empty());
    }

    #[test]
    fn dictionary_vocab_gates_unseen_words() {
        let mut tags = vec![WordSplit::SeenTrain; 5];
        tags[1] = WordSplit::UnseenTest; // name
        let corpus = figure_corpus().with_split_tags(tags).unwrap();
        let train = BatchOptions::default();
        let full = BatchOptions {
            dict_vocab: DictVocab::FullVocab,
            ..train
        };
        let a = build_item(&corpus, 0, &train, &mut rng::stream(0, "b")).unwrap();
        let b = build_item(&corpus, 0, &full, &mut rng::stream(0, "b")).unwrap();
        assert!(!a.bg_dict.contains_key(&WordId(1)));
        assert!(b.bg_dict.contains_key(&WordId(1)));
    }

    fn many_word_corpus(words: usize, per_word: usize) -> Corpus {
        let names: Vec<String> = (0..words).map(|i| format!("w{i}")).collect();
        let vocab = Vocabulary::new(&names).unwrap();
        let mut continuous = Vec::new();
        for w in 0..words {
            for k in 0..per_word {
                continuous.push(ContinuousSequence {
                    id: format!("s{w}_{k}"),
                    features: series(60),
                    subtitle: vec![names[w].clone(), names[(w + 1) % words].clone()],
                    annotation: Some(Annotation {
                        word: WordId(w as u32),
                        frame: 30,
                        confidence: 1.0,
                    }),
                    split: SequenceSplit::Train,
                });
            }
        }
        let dictionary = (0..words)
            .map(|w| DictionaryEntry {
                word: WordId(w as u32),
                variants: vec![series(2)],
            })
            .collect();
        Corpus::new(vocab, continuous, dictionary).unwrap()
    }

    #[test]
    fn class_balanced_batch_has_distinct_words() {
        let corpus = many_word_corpus(130, 2);
        let batch = build_minibatch(&corpus, 128, &BatchOptions::default(), &mut rng::stream(0, "b")).unwrap();
        assert_eq!(batch.items.len(), 128);
        let words: BTreeSet<_> = batch.items.iter().map(|i| i.fg_word).collect();
        assert_eq!(words.len(), 128);

        let small = many_word_corpus(10, 3);
        let err = build_minibatch(&small, 12, &BatchOptions::default(), &mut rng::stream(0, "b")).unwrap_err();
        assert!(matches!(err, Error::InsufficientWords { needed: 12, available: 10 }));
        let unbalanced = BatchOptions {
            class_balanced: false,
            ..BatchOptions::default()
        };
        assert_eq!(build_minibatch(&small, 12, &unbalanced, &mut rng::stream(0, "b")).unwrap().items.len(), 12);
    }

    #[test]
    fn minibatch_is_deterministic() {
        let corpus = many_word_corpus(20, 3);
        let a = build_minibatch(&corpus, 8, &BatchOptions::default(), &mut rng::stream(3, "b")).unwrap();
        let b = build_minibatch(&corpus, 8, &BatchOptions::default(), &mut rng::stream(3, "b")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn epoch_plan_covers_pool_once() {
        let corpus = many_word_corpus(20, 3);
        let pool = training_pool(&corpus);
        let plan = plan_epoch(&corpus, &pool, 8, true, &mut rng::stream(0, "e"));
        let mut flat: Vec<usize> = plan.iter().flatten().copied().collect();
        flat.sort_unstable();
        assert_eq!(flat, pool);
        for batch in &plan {
            assert!(batch.len() <= 8);
            let words: BTreeSet<_> = batch.iter().map(|&i| corpus.continuous()[i].annotation.unwrap().word).collect();
            assert_eq!(words.len(), batch.len());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn foreground_clip_inside_correctness_window(t in 20u32..5000, extra in 16usize..400, seed in any::<u64>()) {
                let windows = t as usize + extra;
                let s = sample_foreground_start(t, windows, &mut rng::stream(seed, "p")) as i64;
                let t = i64::from(t);
                prop_assert!(s >= t - 20 && s + 15 <= t + 5);
            }

            #[test]
            fn background_disjoint(windows in 17usize..400, fg_frac in 0.0f64..1.0, seed in any::<u64>()) {
                let fg = ((windows - 1) as f64 * fg_frac) as usize;
                let starts = sample_background_starts(windows, fg, 10, &mut rng::stream(seed, "p"));
                for s in starts {
                    prop_assert!(s < windows);
                    prop_assert!(s + 16 <= fg || s >= fg + 16);
                }
            }
        }
    }
}
