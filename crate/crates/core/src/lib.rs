//! Sign spotting from weakly-aligned subtitles and isolated dictionary videos.
//!
//! Continuous signing and dictionary clips arrive as precomputed 1024-d
//! window features. A small MLP head maps both into a shared embedding space
//! trained with a multiple-instance contrastive loss over bags built from
//! sparse annotations and subtitles.

pub mod bags;
pub mod corpus;
pub mod error;
pub mod evalmetrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod spotting;
pub mod synth;
pub mod training;

pub use bags::{AnchoredBags, BagOptions, BagSet, PairRef, SegBackMode, SynonymPolicy};
pub use corpus::{
    load_manifest, save_manifest, Annotation, ContinuousSequence, Corpus, DictionaryEntry,
    FeatureSeries, SequenceSplit, Vocabulary, WordId, WordSplit, FEATURE_DIM, WINDOW_FRAMES,
};
pub use error::{Error, Result};
pub use evalmetrics::{evaluate, EvalOptions, EvalReport, EvalSplit};
pub use model::{read_model, write_model, ModelParams, MODEL_DIMS};
pub use sampler::{DictVocab, LossMode, Minibatch};
pub use spotting::{FrameAnchor, SpotResult};
pub use synth::{generate, SynthConfig, SynthCorpus};
pub use training::{train, AnchorWeighting, EpochLog, TrainConfig, TrainOutput};
