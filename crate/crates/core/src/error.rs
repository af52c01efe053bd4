use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("turn timestamps are not chronological at turn {index}")]
    NonChronological { index: usize },

    #[error("turn {index} has an empty query")]
    EmptyQuery { index: usize },

    #[error("erroneous span {start}..{end} is invalid: {reason}")]
    BadLabelSpan {
        start: usize,
        end: usize,
        reason: String,
    },

    #[error("session has fewer than two turns")]
    TooFewTurns,

    #[error("final turn carries no hypothesis")]
    MissingHypothesis,

    #[error("hypothesis has {0} entities, above the cap")]
    TooManyEntities(usize),

    #[error("invalid entity: {0}")]
    InvalidEntity(String),

    #[error("source query needs {needed} tokens but max_len is {max_len}")]
    SourceQueryTooLong { needed: usize, max_len: usize },

    #[error("feature vector is empty")]
    EmptyInput,

    #[error("projection norm {0:e} is degenerate")]
    DegenerateNorm(f64),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),

    #[error("candidate embeddings are stale (index version {index:?}, weights version {weights})")]
    StaleEmbeddings { index: Option<u32>, weights: u32 },

    #[error("span {start}..{end} is invalid for the source query")]
    InvalidSpan { start: usize, end: usize },

    #[error("batch needs at least two examples, got {0}")]
    DegenerateBatch(usize),

    #[error("auxiliary loss requested but examples carry no domain labels")]
    MissingDomainLabels,

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("value {0:?} is too short to corrupt")]
    TooShort(String),

    #[error("test set is empty")]
    EmptyTestSet,

    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    #[error("refresh failed for {} entities", .0.len())]
    RefreshFailed(Vec<(u64, String)>),
}

impl Error {
    /// Stable kind tag used in machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonChronological { .. } => "NonChronological",
            Error::EmptyQuery { .. } => "EmptyQuery",
            Error::BadLabelSpan { .. } => "BadLabelSpan",
            Error::TooFewTurns => "TooFewTurns",
            Error::MissingHypothesis => "MissingHypothesis",
            Error::TooManyEntities(_) => "TooManyEntities",
            Error::InvalidEntity(_) => "InvalidEntity",
            Error::SourceQueryTooLong { .. } => "SourceQueryTooLong",
            Error::EmptyInput => "EmptyInput",
            Error::DegenerateNorm(_) => "DegenerateNorm",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::CorruptSnapshot(_) => "CorruptSnapshot",
            Error::StaleEmbeddings { .. } => "StaleEmbeddings",
            Error::InvalidSpan { .. } => "InvalidSpan",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::MissingDomainLabels => "MissingDomainLabels",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::TooShort(_) => "TooShort",
            Error::EmptyTestSet => "EmptyTestSet",
            Error::EndpointUnreachable(_) => "EndpointUnreachable",
            Error::Config(_) => "Config",
            Error::Io { .. } => "IoError",
            Error::Json { .. } => "Json",
            Error::RefreshFailed(_) => "RefreshFailed",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
