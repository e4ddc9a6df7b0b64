use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: bad magic {found:?}, expected {expected:?}", path.display())]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{}: unsupported version {version}", path.display())]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{}: truncated payload, expected {expected} bytes, found {found}", path.display())]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{}: non-finite value at row {row}, column {col}", path.display())]
    NonFinite { path: PathBuf, row: usize, col: usize },

    #[error("record `{record}`: {} has dimension {found}, expected {expected}", path.display())]
    DimensionMismatch {
        record: String,
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("record `{record}`: word `{word}` is not in the vocabulary")]
    UnresolvedWord { record: String, word: String },

    #[error("record `{record}`: {source}")]
    InRecord {
        record: String,
        #[source]
        source: Box<Error>,
    },

    #[error("record `{record}`: {message}")]
    Manifest { record: String, message: String },

    #[error("malformed manifest {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid feature series: {0}")]
    InvalidSeries(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("class-balanced batch needs {needed} distinct annotated words, only {available} available")]
    InsufficientWords { needed: usize, available: usize },

    #[error("loss called with an empty anchor list")]
    EmptyAnchors,

    #[error("anchor {anchor} has {found} positives, single-instance loss needs exactly 1")]
    NotSinglePositive { anchor: usize, found: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("{0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
