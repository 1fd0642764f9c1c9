use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate edge between user {user} and item {item}")]
    DuplicateEdge { user: usize, item: usize },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("label {label} out of range for {label_count} labels")]
    LabelOutOfRange { label: i64, label_count: usize },

    #[error("content references unknown item {0}")]
    UnknownItem(usize),

    #[error("content row for item {item} has width {found}, expected {expected}")]
    DimensionMismatch {
        item: usize,
        expected: usize,
        found: usize,
    },

    #[error("need at least {required} edges to split, got {found}")]
    TooFewEdges { required: usize, found: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("loss does not depend on any trainable parameter")]
    DisconnectedGraph,

    #[error("cache shape mismatch: expected {expected:?} (edges, dim), found {found:?}")]
    CacheShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("sample of {requested} items requested from {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("{requested} edges requested but only {capacity} user-item pairs exist")]
    TooManyEdges { requested: usize, capacity: usize },

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("metric undefined: labels contain a single class")]
    SingleClass,

    #[error("no edges satisfy the statistic's precondition")]
    NoApplicableEdges,

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("{file}:{line}: unknown key `{key}`")]
    UnknownKey {
        file: String,
        line: usize,
        key: String,
    },

    #[error("missing required setting `{0}`")]
    MissingRequired(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported format in {0}")]
    FormatVersionMismatch(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short name, used in the CLI's machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DuplicateEdge { .. } => "DuplicateEdge",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::UnknownItem(_) => "UnknownItem",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::TooFewEdges { .. } => "TooFewEdges",
            Error::EmptyInput => "EmptyInput",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::DisconnectedGraph => "DisconnectedGraph",
            Error::CacheShapeMismatch { .. } => "CacheShapeMismatch",
            Error::SampleTooLarge { .. } => "SampleTooLarge",
            Error::TooManyEdges { .. } => "TooManyEdges",
            Error::DomainError(_) => "DomainError",
            Error::SingleClass => "SingleClass",
            Error::NoApplicableEdges => "NoApplicableEdges",
            Error::Parse { .. } => "ParseError",
            Error::UnknownKey { .. } => "UnknownKey",
            Error::MissingRequired(_) => "MissingRequired",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::FormatVersionMismatch(_) => "FormatVersionMismatch",
            Error::Io { .. } => "IoError",
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: (usize, usize),
        found: (usize, usize),
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
