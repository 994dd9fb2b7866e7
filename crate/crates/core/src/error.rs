use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("row {row}: feature dimension {found} does not match corpus dimension {expected}")]
    DimensionMismatch { row: usize, expected: usize, found: usize },
    #[error("row {row}: non-finite feature value in {path}")]
    NonFinite { row: usize, path: PathBuf },
    #[error("lexicon line {line}: {message}")]
    Lexicon { line: usize, message: String },
    #[error("manifest row {row}: {message}")]
    Manifest { row: usize, message: String },
    #[error("requested {requested} paired words but only {available} annotated words are available")]
    TooManyPairs { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("rank of the data ({rank}) is below the requested projection dimension {requested}; use a smaller dimension")]
    RankDeficient { rank: usize, requested: usize },
    #[error("non-finite objective at step {step}")]
    NonFiniteObjective { step: usize },
    #[error("word `{0}` is not in the lexicon")]
    UnknownWord(String),
    #[error("{0}")]
    Serde(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
