//! Test-time spotting: sliding-window embeddings, similarity traces and
//! their argmax.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::corpus::{ContinuousSequence, Corpus, DictionaryEntry, Vocabulary, WordId, WINDOW_FRAMES};
use crate::error::{Error, Result};
use crate::model::{normalize_rows, pool_dictionary, ModelParams};
use crate::sampler::tokenize;

/// Which frame of the best window is reported as the sign time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FrameAnchor {
    #[default]
    Start,
    Center,
}

impl FrameAnchor {
    pub fn frame(self, window_start: usize) -> usize {
        match self {
            FrameAnchor::Start => window_start,
            FrameAnchor::Center => window_start + WINDOW_FRAMES / 2,
        }
    }
}

impl std::str::FromStr for FrameAnchor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "start" => Ok(FrameAnchor::Start),
            "center" => Ok(FrameAnchor::Center),
            _ => Err(Error::InvalidConfig(format!("unknown frame anchor `{s}`"))),
        }
    }
}

impl std::fmt::Display for FrameAnchor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FrameAnchor::Start => "start",
            FrameAnchor::Center => "center",
        })
    }
}

/// Embeddings of every `stride`-th window; row `i` is window `positions[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding {
    pub positions: Vec<usize>,
    pub embeddings: Array2<f32>,
}

pub fn embed_sequence(params: &ModelParams, seq: &ContinuousSequence, stride: usize) -> Result<SequenceEmbedding> {
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    let positions: Vec<usize> = (0..seq.features.rows()).step_by(stride).collect();
    let dim = seq.features.dim();
    let mut x = Array2::<f32>::zeros((positions.len(), dim));
    for (mut row, &p) in x.rows_mut().into_iter().zip(&positions) {
        row.as_slice_mut().unwrap().copy_from_slice(seq.features.row(p));
    }
    Ok(SequenceEmbedding {
        positions,
        embeddings: params.forward(x.view()),
    })
}

/// One embedding per dictionary variant, from the pooled subclip features.
pub fn embed_entry(params: &ModelParams, entry: &DictionaryEntry) -> Array2<f32> {
    let dim = params.input_dim();
    let mut x = Array2::<f32>::zeros((entry.variants.len(), dim));
    for (mut row, v) in x.rows_mut().into_iter().zip(&entry.variants) {
        row.as_slice_mut().unwrap().copy_from_slice(&pool_dictionary(v));
    }
    params.forward(x.view())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpotResult {
    pub word: WordId,
    /// Start of the best window.
    pub best_frame: usize,
    pub best_variant: usize,
    pub score: f32,
    pub positions: Vec<usize>,
    /// `trace[i][v]`: cosine between window `positions[i]` and variant `v`.
    pub trace: Vec<Vec<f32>>,
}

impl SpotResult {
    pub fn predicted_frame(&self, anchor: FrameAnchor) -> usize {
        anchor.frame(self.best_frame)
    }

    /// `window_start,variant,similarity` rows with a header.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("window_start,variant,similarity\n");
        for (p, row) in self.positions.iter().zip(&self.trace) {
            for (v, s) in row.iter().enumerate() {
                let _ = writeln!(out, "{p},{v},{s}");
            }
        }
        out
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        fs::write(path, self.trace_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Cosine grid between row sets, clamped into `[-1, 1]`.
pub fn cosine_grid(a: ArrayView2<f32>, b: ArrayView2<f32>) -> Array2<f32> {
    let ua = normalize_rows(&a.to_owned()).unit;
    let ub = normalize_rows(&b.to_owned()).unit;
    ua.dot(&ub.t()).mapv(|s| s.clamp(-1.0, 1.0))
}

/// Maximum over the trace; ties go to the smallest window, then the smallest
/// variant.
pub fn spot(seq: &SequenceEmbedding, variants: ArrayView2<f32>, word: WordId) -> SpotResult {
    assert!(variants.nrows() >= 1, "spotting needs at least one variant");
    let grid = cosine_grid(seq.embeddings.view(), variants);
    let mut best = (0usize, 0usize, f32::NEG_INFINITY);
    for (i, row) in grid.rows().into_iter().enumerate() {
        for (v, &s) in row.iter().enumerate() {
            if s > best.2 {
                best = (i, v, s);
            }
        }
    }
    SpotResult {
        word,
        best_frame: seq.positions[best.0],
        best_variant: best.1,
        score: best.2,
        positions: seq.positions.clone(),
        trace: grid.rows().into_iter().map(|r| r.to_vec()).collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Densified {
    pub results: Vec<SpotResult>,
    /// Subtitle words without a dictionary entry.
    pub skipped: Vec<WordId>,
}

/// Spots every subtitle word that has a dictionary entry.
pub fn densify(seq: &ContinuousSequence, params: &ModelParams, corpus: &Corpus, stride: usize) -> Result<Densified> {
    let emb = embed_sequence(params, seq, stride)?;
    let mut out = Densified::default();
    for w in tokenize(&seq.subtitle, corpus.vocabulary()) {
        match corpus.dictionary_entry(w) {
            Some(entry) => out.results.push(spot(&emb, embed_entry(params, entry).view(), w)),
            None => out.skipped.push(w),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub a: WordId,
    pub b: WordId,
    pub score: f32,
}

/// For each entry of `a`, the `k` entries of `b` with the highest cosine;
/// an entry pair scores the maximum over its variant pairs.
pub fn cross_dictionary_neighbors(
    a: &[DictionaryEntry],
    b: &[DictionaryEntry],
    params: &ModelParams,
    k: usize,
) -> Vec<Neighbor> {
    let ea: Vec<Array2<f32>> = a.iter().map(|e| embed_entry(params, e)).collect();
    let eb: Vec<Array2<f32>> = b.iter().map(|e| embed_entry(params, e)).collect();
    let mut out = Vec::new();
    for (entry_a, va) in a.iter().zip(&ea) {
        let mut scored: Vec<(f32, WordId)> = b
            .iter()
            .zip(&eb)
            .map(|(entry_b, vb)| {
                let g = cosine_grid(va.view(), vb.view());
                (g.fold(f32::NEG_INFINITY, |m, &s| m.max(s)), entry_b.word)
            })
            .collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        out.extend(scored.into_iter().take(k).map(|(score, w)| Neighbor {
            a: entry_a.word,
            b: w,
            score,
        }));
    }
    out
}

pub fn neighbors_csv(n: &[Neighbor], va: &Vocabulary, vb: &Vocabulary) -> String {
    let mut out = String::from("word_a,word_b,score\n");
    for x in n {
        let _ = writeln!(out, "{},{},{}", va.word(x.a), vb.word(x.b), x.score);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::FeatureSeries;
    use crate::model::MODEL_DIMS;
    use crate::rng;
    use crate::synth::{generate, SynthConfig, Transform};
    use ndarray::Array2;
    use rand::Rng as _;

    fn random_rows(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut r = rng::stream(seed, "test");
        Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0))
    }

    fn seq_of(n: usize, seed: u64) -> ContinuousSequence {
        let x = random_rows(n, 1024, seed);
        ContinuousSequence {
            id: "s".into(),
            features: FeatureSeries::new(n, x.into_raw_vec_and_offset().0).unwrap(),
            subtitle: vec!["x".into()],
            annotation: None,
            split: Default::default(),
        }
    }

    fn small_model() -> ModelParams {
        ModelParams::init(MODEL_DIMS, &mut rng::stream(0, "init"))
    }

    #[test]
    fn stride_counts() {
        let m = small_model();
        let s = seq_of(200, 1);
        assert_eq!(embed_sequence(&m, &s, 1).unwrap().positions.len(), 200);
        let e8 = embed_sequence(&m, &s, 8).unwrap();
        assert_eq!(e8.positions.len(), 25);
        assert_eq!(e8.positions[..3], [0, 8, 16]);
        assert!(embed_sequence(&m, &s, 0).is_err());
    }

    #[test]
    fn planted_window_and_variant() {
        let mut emb = random_rows(100, 16, 2);
        let variants = random_rows(3, 16, 3);
        emb.row_mut(57).assign(&variants.row(2));
        let seq = SequenceEmbedding {
            positions: (0..100).collect(),
            embeddings: emb.clone(),
        };
        let r = spot(&seq, variants.view(), WordId(0));
        assert_eq!((r.best_frame, r.best_variant), (57, 2));
        assert!((r.score - 1.0).abs() < 1e-6);
        let scaled = SequenceEmbedding {
            positions: seq.positions.clone(),
            embeddings: emb * 3.7,
        };
        let s = spot(&scaled, variants.view(), WordId(0));
        assert_eq!((s.best_frame, s.best_variant), (57, 2));
        let max = r.trace.iter().flatten().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        assert_eq!(max, r.score);
    }

    #[test]
    fn ties_prefer_smallest_window_then_variant() {
        let emb = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let variants = Array2::from_shape_vec((2, 2), vec![2.0, 0.0, 1.0, 0.0]).unwrap();
        let seq = SequenceEmbedding {
            positions: vec![0, 4, 8],
            embeddings: emb,
        };
        let r = spot(&seq, variants.view(), WordId(1));
        assert_eq!((r.best_frame, r.best_variant), (0, 0));
    }

    #[test]
    fn trace_csv_shape() {
        let seq = SequenceEmbedding {
            positions: vec![0, 1],
            embeddings: random_rows(2, 4, 5),
        };
        let r = spot(&seq, random_rows(2, 4, 6).view(), WordId(0));
        let csv = r.trace_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("window_start,variant,similarity\n0,0,"));
    }

    #[test]
    fn stride_one_dominates_stride_eight() {
        let m = small_model();
        let s = seq_of(120, 7);
        let variants = random_rows(2, 256, 8);
        let a = spot(&embed_sequence(&m, &s, 1).unwrap(), variants.view(), WordId(0));
        let b = spot(&embed_sequence(&m, &s, 8).unwrap(), variants.view(), WordId(0));
        assert!(a.score >= b.score);
    }

    #[test]
    fn self_neighbors() {
        let synth = generate(&SynthConfig {
            vocab_size: 8,
            num_sequences: 4,
            seq_windows: (60, 70),
            filler_signs: 4,
            ..Default::default()
        })
        .unwrap();
        let d = synth.corpus.dictionary();
        let m = small_model();
        let n = cross_dictionary_neighbors(d, d, &m, 1);
        assert_eq!(n.len(), d.len());
        for x in &n {
            assert_eq!(x.a, x.b);
            assert!((x.score - 1.0).abs() < 1e-5);
        }
        assert_eq!(cross_dictionary_neighbors(&d[..2], &d[..3], &m, 10).len(), 6);
    }

    /// Zero noise, identical maps and near-orthogonal prototypes: raw
    /// features spot every planted sign inside its correctness window, and
    /// densification finds all of them.
    #[test]
    fn zero_noise_identity_localizes_every_sign() {
        let synth = generate(&SynthConfig {
            vocab_size: 10,
            num_sequences: 12,
            seq_windows: (60, 90),
            transform: Transform::Identity,
            noise_sigma: 0.0,
            coarticulation: 0.0,
            filler_signs: 30,
            signed_fraction: 1.0,
            variant_similarity: 0.0,
            latent_dim: 256,
            ..Default::default()
        })
        .unwrap();
        let c = &synth.corpus;
        let m = small_model();
        for seq in c.continuous() {
            let raw = SequenceEmbedding {
                positions: (0..seq.features.rows()).collect(),
                embeddings: Array2::from_shape_vec((seq.features.rows(), 1024), seq.features.as_slice().to_vec()).unwrap(),
            };
            let tokens = tokenize(&seq.subtitle, c.vocabulary());
            assert_eq!(densify(seq, &m, c, 1).unwrap().results.len(), tokens.len());
            for w in tokens {
                let entry = c.dictionary_entry(w).unwrap();
                let pooled: Vec<f32> = entry.variants.iter().flat_map(pool_dictionary).collect();
                let variants = Array2::from_shape_vec((entry.variants.len(), 1024), pooled).unwrap();
                let r = spot(&raw, variants.view(), w);
                let name = c.vocabulary().word(w);
                let truth = synth
                    .ground_truth
                    .iter()
                    .find(|g| g.seq_id == seq.id && g.word == name)
                    .unwrap();
                let t = truth.frame as i64;
                let f = r.best_frame as i64;
                assert!(f >= t - 20 && f <= t + 5, "{} {name}: {f} vs {t}", seq.id);
                assert_eq!(r.best_variant, truth.variant);
            }
        }
    }
}
