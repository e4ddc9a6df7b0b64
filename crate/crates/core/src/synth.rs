//! Synthetic corpus with planted ground truth.
//!
//! Every sign (vocabulary variant or filler) is a unit latent vector. A frame
//! shows the latent of the sign covering it, or a rest latent between signs.
//! Continuous windows average 16 frames and are rendered to 1024-d with the
//! continuous map `C`; dictionary subclips average their sampled frames and
//! are rendered with the dictionary map `D`. Both maps share a component `S`:
//!
//! `C = sqrt(1 - gap) S + sqrt(gap) G_c`, `D = sqrt(1 - gap) S + sqrt(gap) G_d`
//!
//! so `gap` controls how far the two renderings of one sign drift apart.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{
    save_manifest, split_tags, Annotation, ContinuousSequence, Corpus, DictionaryEntry,
    FeatureSeries, SequenceSplit, Vocabulary, WordId, WordSplit, FEATURE_DIM, WINDOW_FRAMES,
};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::sampler::dictionary_subclip_indices;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    /// Shared plus domain-specific random maps, mixed by `domain_gap`.
    #[default]
    Random,
    /// Both domains embed the latent into the first coordinates unchanged.
    Identity,
}

impl std::str::FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Transform::Random),
            "identity" => Ok(Transform::Identity),
            _ => Err(Error::InvalidConfig(format!("unknown transform `{s}`"))),
        }
    }
}

impl std::fmt::Display for Transform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Transform::Random => "random",
            Transform::Identity => "identity",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub num_sequences: usize,
    /// Inclusive range of window counts per sequence.
    pub seq_windows: (usize, usize),
    pub variants_per_word: (usize, usize),
    /// Expected cosine between latent prototypes of two variants of a word.
    pub variant_similarity: f64,
    /// Vocabulary words per subtitle, the annotated one included.
    pub subtitle_words_per_seq: usize,
    /// Chance that a non-annotated subtitle word is actually signed.
    pub signed_fraction: f64,
    pub latent_dim: usize,
    pub transform: Transform,
    pub domain_gap: f64,
    /// Additive Gaussian noise on every rendered feature coordinate.
    pub noise_sigma: f64,
    /// Per-occurrence latent jitter of continuous signs.
    pub coarticulation: f64,
    /// Inclusive range of continuous sign durations in frames.
    pub sign_duration: (usize, usize),
    pub max_gap: usize,
    pub dict_frames: (usize, usize),
    pub dict_sign_duration: (usize, usize),
    pub filler_signs: usize,
    pub unseen_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 50,
            num_sequences: 500,
            seq_windows: (150, 250),
            variants_per_word: (1, 3),
            variant_similarity: 0.7,
            subtitle_words_per_seq: 4,
            signed_fraction: 0.25,
            latent_dim: 48,
            transform: Transform::Random,
            domain_gap: 0.3,
            noise_sigma: 0.5,
            coarticulation: 0.3,
            sign_duration: (7, 13),
            max_gap: 3,
            dict_frames: (40, 72),
            dict_sign_duration: (16, 32),
            filler_signs: 200,
            unseen_fraction: 0.25,
            test_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        let range_ok = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if self.vocab_size < 2 || self.num_sequences == 0 || self.latent_dim == 0 {
            return bad("vocab_size >= 2, num_sequences >= 1 and latent_dim >= 1 required");
        }
        if self.latent_dim > FEATURE_DIM {
            return bad("latent_dim exceeds the feature dimension");
        }
        for (name, r) in [
            ("seq_windows", self.seq_windows),
            ("variants_per_word", self.variants_per_word),
            ("sign_duration", self.sign_duration),
            ("dict_frames", self.dict_frames),
            ("dict_sign_duration", self.dict_sign_duration),
        ] {
            if !range_ok(r) {
                return Err(Error::InvalidConfig(format!("synth: bad range {name} = {r:?}")));
            }
        }
        if self.seq_windows.0 <= WINDOW_FRAMES + 2 * self.sign_duration.1 + self.max_gap {
            return bad("sequences too short to host their signs");
        }
        if self.subtitle_words_per_seq == 0 || self.subtitle_words_per_seq > self.vocab_size {
            return bad("subtitle_words_per_seq must be in [1, vocab_size]");
        }
        if !(0.0..=1.0).contains(&self.domain_gap) {
            return bad("domain_gap must be in [0, 1]");
        }
        if !(self.noise_sigma >= 0.0 && self.coarticulation >= 0.0) {
            return bad("noise levels must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.variant_similarity) {
            return bad("variant_similarity must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.signed_fraction) {
            return bad("signed_fraction must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.unseen_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return bad("unseen_fraction and test_fraction must be in [0, 1)");
        }
        if self.filler_signs == 0 {
            return bad("filler_signs must be at least 1");
        }
        Ok(())
    }

    pub fn num_unseen(&self) -> usize {
        (self.unseen_fraction * self.vocab_size as f64).round() as usize
    }
}

/// One planted occurrence of a vocabulary sign.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSign {
    pub seq_id: String,
    pub word: String,
    /// Frame one past the sign's last frame; the annotation frame when this
    /// occurrence is the annotated one.
    pub frame: u32,
    pub variant: usize,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub ground_truth: Vec<PlantedSign>,
}

pub fn word_name(i: usize) -> String {
    format!("sign{i:03}")
}

const FILLER_TOKENS: [&str; 8] = ["the", "a", "is", "you", "and", "to", "we", "it"];

fn unit_gaussian(dim: usize, r: &mut Rng) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(r));
    let n = v.dot(&v).sqrt();
    v / n
}

fn gaussian_matrix(rows: usize, cols: usize, r: &mut Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(r))
}

struct Renderer {
    map: Array2<f64>,
    noise: f64,
}

impl Renderer {
    /// `latents` is `n x k`; returns `n x 1024` features plus noise.
    fn render(&self, latents: &Array2<f64>, r: &mut Rng) -> FeatureSeries {
        let clean = latents.dot(&self.map.t());
        let data: Vec<f32> = clean
            .iter()
            .map(|&x| {
                let e: f64 = StandardNormal.sample(r);
                (x + self.noise * e) as f32
            })
            .collect();
        FeatureSeries::new(latents.nrows(), data).expect("finite synthetic features")
    }
}

fn maps(config: &SynthConfig) -> (Renderer, Renderer) {
    let k = config.latent_dim;
    let (c, d) = match config.transform {
        Transform::Identity => {
            let mut m = Array2::zeros((FEATURE_DIM, k));
            for i in 0..k {
                m[[i, i]] = 1.0;
            }
            (m.clone(), m)
        }
        Transform::Random => {
            let mut r = rng::stream(config.seed, "synth/maps");
            let shared = gaussian_matrix(FEATURE_DIM, k, &mut r);
            let gc = gaussian_matrix(FEATURE_DIM, k, &mut r);
            let gd = gaussian_matrix(FEATURE_DIM, k, &mut r);
            let (a, b) = ((1.0 - config.domain_gap).sqrt(), config.domain_gap.sqrt());
            (&shared * a + &gc * b, &shared * a + &gd * b)
        }
    };
    (
        Renderer { map: c, noise: config.noise_sigma },
        Renderer { map: d, noise: config.noise_sigma },
    )
}

/// Latent prototypes: per word, one per variant; filler signs; rest poses.
struct Prototypes {
    words: Vec<Vec<Array1<f64>>>,
    fillers: Vec<Array1<f64>>,
    rest_continuous: Array1<f64>,
    rest_dictionary: Array1<f64>,
}

fn prototypes(config: &SynthConfig) -> Prototypes {
    let mut r = rng::stream(config.seed, "synth/prototypes");
    let k = config.latent_dim;
    let (lo, hi) = config.variants_per_word;
    let words = (0..config.vocab_size)
        .map(|_| {
            let n = r.random_range(lo..=hi);
            let base = unit_gaussian(k, &mut r);
            let (a, b) = (config.variant_similarity.sqrt(), (1.0 - config.variant_similarity).sqrt());
            (0..n)
                .map(|_| {
                    let v = &base * a + unit_gaussian(k, &mut r) * b;
                    let norm = v.dot(&v).sqrt();
                    v / norm
                })
                .collect()
        })
        .collect();
    let fillers = (0..config.filler_signs).map(|_| unit_gaussian(k, &mut r)).collect();
    Prototypes {
        words,
        fillers,
        rest_continuous: unit_gaussian(k, &mut r),
        rest_dictionary: unit_gaussian(k, &mut r),
    }
}

/// Frame-level latents of one dictionary video, subsampled into subclips.
fn dictionary_video(config: &SynthConfig, proto: &Array1<f64>, rest: &Array1<f64>, render: &Renderer, r: &mut Rng) -> FeatureSeries {
    let frames = r.random_range(config.dict_frames.0..=config.dict_frames.1);
    let duration = r.random_range(config.dict_sign_duration.0..=config.dict_sign_duration.1).min(frames);
    let start = (frames - duration) / 2;
    let clips = dictionary_subclip_indices(frames, r);
    let mut latents = Array2::zeros((clips.len(), config.latent_dim));
    for (mut row, idx) in latents.rows_mut().into_iter().zip(&clips) {
        let inside = idx.iter().filter(|&&f| f >= start && f < start + duration).count() as f64;
        let frac = inside / idx.len() as f64;
        row.assign(&(proto * frac + rest * (1.0 - frac)));
    }
    render.render(&latents, r)
}

struct Slot {
    start: usize,
    duration: usize,
}

fn layout(num_frames: usize, config: &SynthConfig, r: &mut Rng) -> Vec<Slot> {
    let mut slots = Vec::new();
    let mut f = r.random_range(0..=config.max_gap);
    loop {
        let duration = r.random_range(config.sign_duration.0..=config.sign_duration.1);
        // keep one frame after every sign so its end frame is in range
        if f + duration >= num_frames {
            break;
        }
        slots.push(Slot { start: f, duration });
        f += duration + r.random_range(0..=config.max_gap);
    }
    slots
}

pub fn generate(config: &SynthConfig) -> Result<SynthCorpus> {
    config.validate()?;
    let (cont, dict) = maps(config);
    let protos = prototypes(config);
    let v = config.vocab_size;
    let names: Vec<String> = (0..v).map(word_name).collect();
    let vocab = Vocabulary::new(&names)?;
    let tags = split_tags(v, v - config.num_unseen(), config.seed);
    let seen: Vec<usize> = (0..v).filter(|&i| tags[i] == WordSplit::SeenTrain).collect();
    if seen.is_empty() {
        return Err(Error::InvalidConfig("synth: no seen word left".into()));
    }

    let mut dr = rng::stream(config.seed, "synth/dictionary");
    let dictionary = protos
        .words
        .iter()
        .enumerate()
        .map(|(w, variants)| DictionaryEntry {
            word: WordId(w as u32),
            variants: variants
                .iter()
                .map(|p| dictionary_video(config, p, &protos.rest_dictionary, &dict, &mut dr))
                .collect(),
        })
        .collect();

    let num_test = (config.test_fraction * config.num_sequences as f64).round() as usize;
    let mut is_test: Vec<bool> = (0..config.num_sequences).map(|i| i < num_test).collect();
    is_test.shuffle(&mut rng::stream(config.seed, "synth/sequence-split"));

    let mut continuous = Vec::with_capacity(config.num_sequences);
    let mut ground_truth = Vec::new();
    let all: Vec<usize> = (0..v).collect();
    for (s, &test) in is_test.iter().enumerate() {
        let mut r = rng::indexed_stream(config.seed, "synth/sequence", s as u64);
        let id = format!("seq{s:04}");
        let windows = r.random_range(config.seq_windows.0..=config.seq_windows.1);
        let num_frames = windows + WINDOW_FRAMES - 1;
        let slots = layout(num_frames, config, &mut r);

        let annotated = *if test { &all } else { &seen }.choose(&mut r).unwrap();
        let mut words = vec![annotated];
        let others: Vec<usize> = all.iter().copied().filter(|&w| w != annotated).collect();
        words.extend(others.choose_multiple(&mut r, config.subtitle_words_per_seq - 1));
        let mut unsigned = Vec::new();
        for w in words.split_off(1) {
            if r.random_bool(config.signed_fraction) {
                words.push(w);
            } else {
                unsigned.push(w);
            }
        }
        let n_planted = words.len().min(slots.len());
        let mut slot_ids: Vec<usize> = (0..slots.len()).collect();
        slot_ids.shuffle(&mut r);
        slot_ids.truncate(n_planted);

        let mut frame_latent = Array2::zeros((num_frames, config.latent_dim));
        for row in frame_latent.rows_mut() {
            let mut row = row;
            row.assign(&protos.rest_continuous);
        }
        let mut annotation = None;
        for (slot_index, slot) in slots.iter().enumerate() {
            let planted = slot_ids.iter().position(|&x| x == slot_index);
            let latent = match planted {
                Some(j) => {
                    let w = words[j];
                    let variant = r.random_range(0..protos.words[w].len());
                    let jitter = unit_gaussian(config.latent_dim, &mut r) * config.coarticulation;
                    let end = (slot.start + slot.duration) as u32;
                    ground_truth.push(PlantedSign {
                        seq_id: id.clone(),
                        word: names[w].clone(),
                        frame: end,
                        variant,
                    });
                    if j == 0 {
                        annotation = Some(Annotation {
                            word: WordId(w as u32),
                            frame: end,
                            confidence: r.random_range(0.5f32..=1.0),
                        });
                    }
                    &protos.words[w][variant] + &jitter
                }
                None => protos.fillers.choose(&mut r).unwrap().clone(),
            };
            for f in slot.start..slot.start + slot.duration {
                frame_latent.row_mut(f).assign(&latent);
            }
        }

        // window w averages frames [w, w + 15]
        let mut window_latent = Array2::zeros((windows, config.latent_dim));
        let mut acc = Array1::<f64>::zeros(config.latent_dim);
        for f in 0..num_frames {
            acc += &frame_latent.row(f);
            if f >= WINDOW_FRAMES {
                acc -= &frame_latent.row(f - WINDOW_FRAMES);
            }
            if f + 1 >= WINDOW_FRAMES {
                window_latent.row_mut(f + 1 - WINDOW_FRAMES).assign(&(&acc / WINDOW_FRAMES as f64));
            }
        }
        let features = cont.render(&window_latent, &mut r);

        let mut subtitle: Vec<String> = words.iter().chain(&unsigned).map(|&w| names[w].clone()).collect();
        let extra = r.random_range(1..=4);
        for _ in 0..extra {
            subtitle.push(FILLER_TOKENS.choose(&mut r).unwrap().to_string());
        }
        subtitle.shuffle(&mut r);
        if let Some(last) = subtitle.last_mut() {
            last.push('.');
        }
        if let Some(first) = subtitle.first_mut() {
            *first = capitalize(first);
        }

        continuous.push(ContinuousSequence {
            id,
            features,
            subtitle,
            annotation,
            split: if test { SequenceSplit::Test } else { SequenceSplit::Train },
        });
    }

    let corpus = Corpus::new(vocab, continuous, dictionary)?.with_split_tags(tags)?;
    Ok(SynthCorpus { corpus, ground_truth })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Writes the manifest, feature files and `ground_truth.json` under `dir`.
pub fn write_synth(synth: &SynthCorpus, dir: &Path) -> Result<PathBuf> {
    let manifest = save_manifest(&synth.corpus, dir)?;
    let path = dir.join(GROUND_TRUTH_FILE);
    let mut text = serde_json::to_string_pretty(&synth.ground_truth).expect("ground truth serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_ground_truth(dir: &Path) -> Result<Vec<PlantedSign>> {
    let path = dir.join(GROUND_TRUTH_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}
