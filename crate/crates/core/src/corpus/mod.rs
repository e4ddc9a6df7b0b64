//! Corpus data model: vocabulary, trunk feature series, continuous subtitled
//! sequences with sparse annotations, and the isolated-sign dictionary.

mod features;
mod manifest;

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use features::{read_feature_file, write_feature_file, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{load_manifest, save_manifest, MANIFEST_FILE};

/// Width of the frozen trunk features.
pub const FEATURE_DIM: usize = 1024;
/// Frames covered by one trunk window.
pub const WINDOW_FRAMES: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WordId(pub u32);

impl WordId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, WordId>,
}

impl Vocabulary {
    /// Words are lowercased; duplicates (after lowercasing) are rejected.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            let w = w.as_ref().to_lowercase();
            if w.is_empty() {
                return Err(Error::Manifest {
                    record: "vocabulary".into(),
                    message: "empty word".into(),
                });
            }
            let id = WordId(out.words.len() as u32);
            if out.index.insert(w.clone(), id).is_some() {
                return Err(Error::Manifest {
                    record: "vocabulary".into(),
                    message: format!("duplicate word `{w}`"),
                });
            }
            out.words.push(w);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<WordId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: WordId) -> &str {
        &self.words[id.index()]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn ids(&self) -> impl Iterator<Item = WordId> {
        (0..self.words.len() as u32).map(WordId)
    }
}

/// Row-major `rows x FEATURE_DIM` block of trunk features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSeries {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSeries {
    pub fn new(rows: usize, data: Vec<f32>) -> Result<Self> {
        let s = Self::with_dim(rows, FEATURE_DIM, data)?;
        if let Some(i) = s.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidSeries(format!(
                "non-finite value at row {}, column {}",
                i / FEATURE_DIM,
                i % FEATURE_DIM
            )));
        }
        Ok(s)
    }

    pub(crate) fn with_dim(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::InvalidSeries("series has no rows".into()));
        }
        if data.len() != rows * dim {
            return Err(Error::InvalidSeries(format!(
                "{} values for {rows}x{dim}",
                data.len()
            )));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub word: WordId,
    /// Mouthing timestamp on the frame timeline.
    pub frame: u32,
    pub confidence: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SequenceSplit {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousSequence {
    pub id: String,
    /// Row `w` is the trunk feature of frames `[w, w + 15]`.
    pub features: FeatureSeries,
    /// Raw subtitle tokens, as ingested.
    pub subtitle: Vec<String>,
    pub annotation: Option<Annotation>,
    pub split: SequenceSplit,
}

impl ContinuousSequence {
    pub fn num_windows(&self) -> usize {
        self.features.rows()
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows() + WINDOW_FRAMES - 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DictionaryEntry {
    pub word: WordId,
    /// One series per variant video; each row is one subclip feature.
    pub variants: Vec<FeatureSeries>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordSplit {
    SeenTrain,
    UnseenTest,
}

/// Immutable after construction; every word reference is resolved.
#[derive(Clone, Debug)]
pub struct Corpus {
    vocabulary: Vocabulary,
    continuous: Vec<ContinuousSequence>,
    dictionary: Vec<DictionaryEntry>,
    dict_index: Vec<Option<usize>>,
    split_tags: Vec<WordSplit>,
    synonyms: Vec<BTreeSet<WordId>>,
}

impl Corpus {
    pub fn new(
        vocabulary: Vocabulary,
        continuous: Vec<ContinuousSequence>,
        dictionary: Vec<DictionaryEntry>,
    ) -> Result<Self> {
        let v = vocabulary.len();
        let mut dict_index = vec![None; v];
        for (i, entry) in dictionary.iter().enumerate() {
            let record = format!("dictionary[{i}]");
            if entry.word.index() >= v {
                return Err(Error::Manifest {
                    record,
                    message: format!("word id {} out of range", entry.word.0),
                });
            }
            if entry.variants.is_empty() {
                return Err(Error::Manifest {
                    record,
                    message: "entry has no variants".into(),
                });
            }
            if dict_index[entry.word.index()].replace(i).is_some() {
                return Err(Error::Manifest {
                    record,
                    message: format!("duplicate entry for `{}`", vocabulary.word(entry.word)),
                });
            }
        }
        for seq in &continuous {
            if seq.subtitle.is_empty() {
                return Err(Error::Manifest {
                    record: seq.id.clone(),
                    message: "empty subtitle".into(),
                });
            }
            if let Some(a) = &seq.annotation {
                if a.word.index() >= v {
                    return Err(Error::Manifest {
                        record: seq.id.clone(),
                        message: format!("annotation word id {} out of range", a.word.0),
                    });
                }
                if a.frame as usize >= seq.num_frames() {
                    return Err(Error::Manifest {
                        record: seq.id.clone(),
                        message: format!(
                            "annotation frame {} beyond {} frames",
                            a.frame,
                            seq.num_frames()
                        ),
                    });
                }
                if !(0.5..=1.0).contains(&a.confidence) {
                    return Err(Error::Manifest {
                        record: seq.id.clone(),
                        message: format!("confidence {} outside [0.5, 1]", a.confidence),
                    });
                }
            }
        }
        Ok(Self {
            split_tags: vec![WordSplit::SeenTrain; v],
            vocabulary,
            continuous,
            dictionary,
            dict_index,
            synonyms: Vec::new(),
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn continuous(&self) -> &[ContinuousSequence] {
        &self.continuous
    }

    pub fn dictionary(&self) -> &[DictionaryEntry] {
        &self.dictionary
    }

    pub fn dictionary_entry(&self, word: WordId) -> Option<&DictionaryEntry> {
        self.dict_index
            .get(word.index())
            .copied()
            .flatten()
            .map(|i| &self.dictionary[i])
    }

    pub fn split_tag(&self, word: WordId) -> WordSplit {
        self.split_tags[word.index()]
    }

    pub fn split_tags(&self) -> &[WordSplit] {
        &self.split_tags
    }

    pub fn words_with_tag(&self, tag: WordSplit) -> Vec<WordId> {
        self.vocabulary
            .ids()
            .filter(|w| self.split_tags[w.index()] == tag)
            .collect()
    }

    /// Replaces the seen/unseen tags; `tags.len()` must equal the vocabulary size.
    pub fn with_split_tags(mut self, tags: Vec<WordSplit>) -> Result<Self> {
        if tags.len() != self.vocabulary.len() {
            return Err(Error::Contract(format!(
                "{} split tags for {} words",
                tags.len(),
                self.vocabulary.len()
            )));
        }
        self.split_tags = tags;
        Ok(self)
    }

    /// Groups of words treated as synonyms by the `discard` negative policy.
    pub fn synonyms(&self) -> &[BTreeSet<WordId>] {
        &self.synonyms
    }

    pub fn with_synonyms(mut self, groups: Vec<BTreeSet<WordId>>) -> Self {
        self.synonyms = groups.into_iter().filter(|g| g.len() > 1).collect();
        self
    }

    pub fn are_synonyms(&self, a: WordId, b: WordId) -> bool {
        a != b && self.synonyms.iter().any(|g| g.contains(&a) && g.contains(&b))
    }

    pub fn num_annotated(&self) -> usize {
        self.continuous
            .iter()
            .filter(|s| s.annotation.is_some())
            .count()
    }
}

/// Demotes annotations below `threshold` to unlabelled background; sequences
/// stay in the corpus for their subtitle supervision.
pub fn filter_by_confidence(mut corpus: Corpus, threshold: f32) -> Result<Corpus> {
    if !(0.5..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!(
            "confidence threshold {threshold} outside [0.5, 1]"
        )));
    }
    for seq in &mut corpus.continuous {
        if seq.annotation.is_some_and(|a| a.confidence < threshold) {
            seq.annotation = None;
        }
    }
    Ok(corpus)
}

/// Seeded partition of the vocabulary into `train_count` seen words and the
/// unseen remainder. `train_count == V` yields the all-seen protocol.
pub fn split_vocabulary(corpus: Corpus, train_count: usize, seed: u64) -> Result<Corpus> {
    let v = corpus.vocabulary.len();
    if train_count > v {
        return Err(Error::InvalidConfig(format!(
            "train_count {train_count} exceeds vocabulary size {v}"
        )));
    }
    let tags = split_tags(v, train_count, seed);
    corpus.with_split_tags(tags)
}

pub(crate) fn split_tags(v: usize, train_count: usize, seed: u64) -> Vec<WordSplit> {
    let mut order: Vec<usize> = (0..v).collect();
    order.shuffle(&mut rng::stream(seed, "split"));
    let mut tags = vec![WordSplit::UnseenTest; v];
    for &i in &order[..train_count] {
        tags[i] = WordSplit::SeenTrain;
    }
    tags
}
