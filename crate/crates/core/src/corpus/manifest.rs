//! JSON manifest tying together the vocabulary, continuous sequences and
//! dictionary entries. Feature paths are relative to the manifest directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    read_feature_file, write_feature_file, Annotation, ContinuousSequence, Corpus,
    DictionaryEntry, FeatureSeries, SequenceSplit, Vocabulary, WordSplit, FEATURE_DIM,
};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    vocabulary: Vec<String>,
    continuous: Vec<ContinuousRecord>,
    dictionary: Vec<DictionaryRecord>,
    /// Words held out from continuous training annotations.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    unseen: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    synonyms: Vec<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContinuousRecord {
    id: String,
    features_path: String,
    subtitle: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotation: Option<AnnotationRecord>,
    #[serde(default)]
    split: SequenceSplit,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    word: String,
    frame: u32,
    confidence: f32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DictionaryRecord {
    word: String,
    variants: Vec<VariantRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariantRecord {
    subclips_path: String,
}

fn in_record(record: &str, e: Error) -> Error {
    match e {
        Error::DimensionMismatch { .. } | Error::UnresolvedWord { .. } | Error::Manifest { .. } => e,
        other => Error::InRecord {
            record: record.to_string(),
            source: Box::new(other),
        },
    }
}

fn load_series(base: &Path, record: &str, rel: &str) -> Result<FeatureSeries> {
    let path = base.join(rel);
    let series = read_feature_file(&path).map_err(|e| in_record(record, e))?;
    if series.dim() != FEATURE_DIM {
        return Err(Error::DimensionMismatch {
            record: record.to_string(),
            path,
            expected: FEATURE_DIM,
            found: series.dim(),
        });
    }
    Ok(series)
}

fn resolve(vocab: &Vocabulary, record: &str, word: &str) -> Result<super::WordId> {
    vocab
        .lookup(&word.to_lowercase())
        .ok_or_else(|| Error::UnresolvedWord {
            record: record.to_string(),
            word: word.to_string(),
        })
}

/// Loads a manifest file (or a directory containing `manifest.json`).
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let path: PathBuf = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.clone(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));

    let vocab = Vocabulary::new(&doc.vocabulary)?;

    let mut continuous = Vec::with_capacity(doc.continuous.len());
    for rec in &doc.continuous {
        let features = load_series(base, &rec.id, &rec.features_path)?;
        let annotation = match &rec.annotation {
            Some(a) => Some(Annotation {
                word: resolve(&vocab, &rec.id, &a.word)?,
                frame: a.frame,
                confidence: a.confidence,
            }),
            None => None,
        };
        continuous.push(ContinuousSequence {
            id: rec.id.clone(),
            features,
            subtitle: rec.subtitle.clone(),
            annotation,
            split: rec.split,
        });
    }

    let mut dictionary = Vec::with_capacity(doc.dictionary.len());
    for rec in &doc.dictionary {
        let record = format!("dictionary:{}", rec.word);
        let word = resolve(&vocab, &record, &rec.word)?;
        let variants = rec
            .variants
            .iter()
            .map(|v| load_series(base, &record, &v.subclips_path))
            .collect::<Result<Vec<_>>>()?;
        dictionary.push(DictionaryEntry { word, variants });
    }

    let mut tags = vec![WordSplit::SeenTrain; vocab.len()];
    for w in &doc.unseen {
        tags[resolve(&vocab, "unseen", w)?.index()] = WordSplit::UnseenTest;
    }
    let synonyms = doc
        .synonyms
        .iter()
        .map(|g| g.iter().map(|w| resolve(&vocab, "synonyms", w)).collect())
        .collect::<Result<Vec<BTreeSet<_>>>>()?;

    Ok(Corpus::new(vocab, continuous, dictionary)?
        .with_split_tags(tags)?
        .with_synonyms(synonyms))
}

/// Writes `corpus` under `dir` as `manifest.json` plus one feature file per
/// sequence and dictionary variant. Returns the manifest path.
pub fn save_manifest(corpus: &Corpus, dir: &Path) -> Result<PathBuf> {
    for sub in ["continuous", "dictionary"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let vocab = corpus.vocabulary();
    let mut continuous = Vec::with_capacity(corpus.continuous().len());
    for (i, seq) in corpus.continuous().iter().enumerate() {
        let rel = format!("continuous/{i:05}.wrlf");
        write_feature_file(&dir.join(&rel), &seq.features)?;
        continuous.push(ContinuousRecord {
            id: seq.id.clone(),
            features_path: rel,
            subtitle: seq.subtitle.clone(),
            annotation: seq.annotation.map(|a| AnnotationRecord {
                word: vocab.word(a.word).to_string(),
                frame: a.frame,
                confidence: a.confidence,
            }),
            split: seq.split,
        });
    }
    let mut dictionary = Vec::with_capacity(corpus.dictionary().len());
    for entry in corpus.dictionary() {
        let mut variants = Vec::with_capacity(entry.variants.len());
        for (v, series) in entry.variants.iter().enumerate() {
            let rel = format!("dictionary/{:05}_{v}.wrlf", entry.word.0);
            write_feature_file(&dir.join(&rel), series)?;
            variants.push(VariantRecord { subclips_path: rel });
        }
        dictionary.push(DictionaryRecord {
            word: vocab.word(entry.word).to_string(),
            variants,
        });
    }
    let doc = ManifestDoc {
        vocabulary: vocab.words().to_vec(),
        continuous,
        dictionary,
        unseen: corpus
            .words_with_tag(WordSplit::UnseenTest)
            .into_iter()
            .map(|w| vocab.word(w).to_string())
            .collect(),
        synonyms: corpus
            .synonyms()
            .iter()
            .map(|g| g.iter().map(|w| vocab.word(*w).to_string()).collect())
            .collect(),
    };
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
