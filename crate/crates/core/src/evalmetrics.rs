//! Retrieval metrics with the temporal correctness window.
//!
//! The ranking pool is every annotated test-split clip. A query of the mAP
//! protocol is one dictionary video of an evaluated word and ranks the pool
//! clips; a hit must carry the query word and be localized inside the
//! window. R@k goes the other way: an evaluated clip ranks every dictionary
//! video.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Annotation, Corpus, SequenceSplit, WordId, WordSplit};
use crate::error::{Error, Result};
use crate::model::{normalize_rows, ModelParams};
use crate::spotting::{embed_entry, embed_sequence, FrameAnchor};

pub const FRAMES_BEFORE: i64 = 20;
pub const FRAMES_AFTER: i64 = 5;
pub const DEFAULT_K: usize = 5;

/// Word match and predicted frame within `[t - 20, t + 5]`.
pub fn correctness_predicate(query_word: WordId, annotation: &Annotation, predicted_frame: usize) -> bool {
    let t = i64::from(annotation.frame);
    let p = predicted_frame as i64;
    query_word == annotation.word && p >= t - FRAMES_BEFORE && p <= t + FRAMES_AFTER
}

/// Mean of precision at each relevant rank, over `total_relevant`.
pub fn average_precision(ranked_relevance: &[bool], total_relevant: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total_relevant as f64
}

/// Fraction of the relevant items found in the first `k` ranks.
pub fn recall_at_k(ranked_relevance: &[bool], total_relevant: usize, k: usize) -> f64 {
    if total_relevant == 0 {
        return 0.0;
    }
    let found = ranked_relevance.iter().take(k).filter(|&&r| r).count();
    found as f64 / total_relevant as f64
}

/// Expected AP of a uniformly random ranking of `n` items with `r` relevant:
/// `(r - 1)/(n - 1) + H_n (n - r) / (n (n - 1))`.
pub fn random_average_precision(n: usize, r: usize) -> f64 {
    assert!(r >= 1 && r <= n, "need 1 <= r <= n");
    if n == 1 {
        return 1.0;
    }
    let (nf, rf) = (n as f64, r as f64);
    let harmonic: f64 = (1..=n).map(|i| 1.0 / i as f64).sum();
    (rf - 1.0) / (nf - 1.0) + harmonic * (nf - rf) / (nf * (nf - 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSplit {
    Seen,
    #[default]
    Unseen,
    All,
}

impl EvalSplit {
    pub fn includes(self, tag: WordSplit) -> bool {
        match self {
            EvalSplit::Seen => tag == WordSplit::SeenTrain,
            EvalSplit::Unseen => tag == WordSplit::UnseenTest,
            EvalSplit::All => true,
        }
    }
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(EvalSplit::Seen),
            "unseen" => Ok(EvalSplit::Unseen),
            "all" => Ok(EvalSplit::All),
            _ => Err(Error::InvalidConfig(format!("unknown split `{s}`"))),
        }
    }
}

impl std::fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalSplit::Seen => "seen",
            EvalSplit::Unseen => "unseen",
            EvalSplit::All => "all",
        })
    }
}

/// Spot scores and argmax frames between every pool clip and every
/// dictionary video.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTable {
    pub clips: Vec<Annotation>,
    /// Word of each dictionary video, in stable id order.
    pub videos: Vec<WordId>,
    /// `score[[clip, video]]`
    pub score: Array2<f32>,
    /// Predicted frame for each (clip, video) spot.
    pub frame: Array2<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    #[serde(rename = "R@5")]
    pub recall: Option<f64>,
    pub queries: usize,
    pub clips: usize,
    /// Expected mAP of a random clip ranking for this class.
    pub random_map: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: EvalSplit,
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "R@5")]
    pub recall_at_k: f64,
    pub k: usize,
    pub localization_accuracy: f64,
    pub random_map: f64,
    pub num_pool_clips: usize,
    pub num_eval_clips: usize,
    pub num_queries: usize,
    /// Diagnostics: classes skipped for lack of dictionary videos or clips.
    pub skipped_classes: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Header plus one summary row, values in percent.
    pub fn csv_summary(&self) -> String {
        let mut out = String::from("split,mAP,R@5,localization_accuracy,random_mAP,classes,queries,clips\n");
        let _ = writeln!(
            out,
            "{},{:.4},{:.4},{:.4},{:.4},{},{},{}",
            self.split,
            100.0 * self.map,
            100.0 * self.recall_at_k,
            100.0 * self.localization_accuracy,
            100.0 * self.random_map,
            self.per_class.len(),
            self.num_queries,
            self.num_eval_clips
        );
        out
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Ranks `ids` by score descending, ties by ascending id.
fn ranked(ids: impl Iterator<Item = usize>, score: impl Fn(usize) -> f32) -> Vec<usize> {
    let mut v: Vec<usize> = ids.collect();
    v.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    v
}

/// Class metrics from a retrieval table. `evaluated(word)` selects the
/// classes; `name(word)` keys the per-class map.
pub fn metrics_from_table(
    table: &RetrievalTable,
    evaluated: impl Fn(WordId) -> bool,
    name: impl Fn(WordId) -> String,
    k: usize,
) -> EvalReport {
    let mut per_class: BTreeMap<WordId, ClassMetrics> = BTreeMap::new();
    let mut skipped = Vec::new();
    let n_clips = table.clips.len();
    let mut words: Vec<WordId> = table.videos.iter().copied().chain(table.clips.iter().map(|a| a.word)).collect();
    words.sort();
    words.dedup();

    let mut num_queries = 0;
    let mut num_eval_clips = 0;
    for w in words.into_iter().filter(|&w| evaluated(w)) {
        let clips_of_w: Vec<usize> = (0..n_clips).filter(|&c| table.clips[c].word == w).collect();
        let videos_of_w: Vec<usize> = (0..table.videos.len()).filter(|&v| table.videos[v] == w).collect();
        if clips_of_w.is_empty() || videos_of_w.is_empty() {
            skipped.push(name(w));
            continue;
        }
        // mAP: each dictionary video of w ranks the pool
        let aps = videos_of_w.iter().map(|&v| {
            let order = ranked(0..n_clips, |c| table.score[[c, v]]);
            let rel: Vec<bool> = order
                .iter()
                .map(|&c| correctness_predicate(w, &table.clips[c], table.frame[[c, v]]))
                .collect();
            average_precision(&rel, clips_of_w.len())
        });
        let map = mean(aps);
        // R@k: each clip of w ranks the dictionary
        let recalls = clips_of_w.iter().map(|&c| {
            let order = ranked(0..table.videos.len(), |v| table.score[[c, v]]);
            let rel: Vec<bool> = order.iter().map(|&v| table.videos[v] == w).collect();
            recall_at_k(&rel, videos_of_w.len(), k)
        });
        num_queries += videos_of_w.len();
        num_eval_clips += clips_of_w.len();
        per_class.insert(
            w,
            ClassMetrics {
                map,
                recall: mean(recalls),
                queries: videos_of_w.len(),
                clips: clips_of_w.len(),
                random_map: Some(random_average_precision(n_clips, clips_of_w.len())),
            },
        );
    }
    EvalReport {
        split: EvalSplit::All,
        map: mean(per_class.values().filter_map(|m| m.map)).unwrap_or(0.0),
        recall_at_k: mean(per_class.values().filter_map(|m| m.recall)).unwrap_or(0.0),
        random_map: mean(per_class.values().filter_map(|m| m.random_map)).unwrap_or(0.0),
        k,
        localization_accuracy: 0.0,
        num_pool_clips: n_clips,
        num_eval_clips,
        num_queries,
        per_class: per_class.into_iter().map(|(w, m)| (name(w), m)).collect(),
        skipped_classes: skipped,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub split: EvalSplit,
    pub stride: usize,
    pub k: usize,
    pub frame_anchor: FrameAnchor,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: EvalSplit::Unseen,
            stride: 1,
            k: DEFAULT_K,
            frame_anchor: FrameAnchor::Start,
        }
    }
}

/// Spot table over the annotated test clips, plus the localization
/// accuracy of clips whose word passes `evaluated` (all variants of the
/// annotated word queried).
pub fn retrieval_table(
    corpus: &Corpus,
    params: &ModelParams,
    opts: &EvalOptions,
) -> Result<(RetrievalTable, Vec<bool>)> {
    let pool: Vec<usize> = corpus
        .continuous()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == SequenceSplit::Test && s.annotation.is_some())
        .map(|(i, _)| i)
        .collect();
    let mut videos = Vec::new();
    let mut dict_rows = Vec::new();
    for entry in corpus.dictionary() {
        let e = embed_entry(params, entry);
        for row in e.rows() {
            videos.push(entry.word);
            dict_rows.extend(row.iter().copied());
        }
    }
    let dict = Array2::from_shape_vec((videos.len(), params.output_dim()), dict_rows).expect("dictionary rows");
    let dict_unit = normalize_rows(&dict).unit;

    // per clip: best score and frame against every dictionary video
    let rows: Vec<(Vec<f32>, Vec<usize>, bool)> = pool
        .par_iter()
        .map(|&i| -> Result<_> {
            let seq = &corpus.continuous()[i];
            let emb = embed_sequence(params, seq, opts.stride)?;
            let unit = normalize_rows(&emb.embeddings).unit;
            let grid = unit.dot(&dict_unit.t());
            let mut best = vec![f32::NEG_INFINITY; videos.len()];
            let mut arg = vec![0usize; videos.len()];
            for (w, row) in grid.rows().into_iter().enumerate() {
                for (v, &s) in row.iter().enumerate() {
                    let s = s.clamp(-1.0, 1.0);
                    if s > best[v] {
                        best[v] = s;
                        arg[v] = w;
                    }
                }
            }
            let frames: Vec<usize> = arg.iter().map(|&w| opts.frame_anchor.frame(emb.positions[w])).collect();
            // localization: best over all variants of the annotated word
            let ann = seq.annotation.unwrap();
            let located = (0..videos.len())
                .filter(|&v| videos[v] == ann.word)
                .fold(None::<(f32, usize)>, |acc, v| match acc {
                    Some((s, _)) if s >= best[v] => acc,
                    _ => Some((best[v], frames[v])),
                })
                .is_some_and(|(_, f)| correctness_predicate(ann.word, &ann, f));
            Ok((best, frames, located))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = pool.len();
    let m = videos.len();
    let mut score = Array2::<f32>::zeros((n, m));
    let mut frame = Array2::<usize>::zeros((n, m));
    let mut located = Vec::with_capacity(n);
    for (c, (s, f, l)) in rows.into_iter().enumerate() {
        score.row_mut(c).assign(&ndarray::Array1::from(s));
        frame.row_mut(c).assign(&ndarray::Array1::from(f));
        located.push(l);
    }
    let clips = pool.iter().map(|&i| corpus.continuous()[i].annotation.unwrap()).collect();
    Ok((
        RetrievalTable {
            clips,
            videos,
            score,
            frame,
        },
        located,
    ))
}

pub fn evaluate(corpus: &Corpus, params: &ModelParams, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let (table, located) = retrieval_table(corpus, params, opts)?;
    let evaluated = |w: WordId| opts.split.includes(corpus.split_tag(w));
    let vocab = corpus.vocabulary();
    let mut report = metrics_from_table(&table, evaluated, |w| vocab.word(w).to_string(), opts.k);
    report.split = opts.split;
    let hits: Vec<bool> = table
        .clips
        .iter()
        .zip(&located)
        .filter(|(a, _)| evaluated(a.word))
        .map(|(_, &l)| l)
        .collect();
    report.localization_accuracy = if hits.is_empty() {
        0.0
    } else {
        hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
    };
    Ok(report)
}
