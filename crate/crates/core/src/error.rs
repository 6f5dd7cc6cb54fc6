use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?}, expected \"MSVF\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("truncated tensor file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("stale or mismatched forward cache: {0}")]
    Cache(String),

    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("manifest line {line}: duplicate entry ({id}, {resolution})")]
    DuplicateEntry {
        line: usize,
        id: String,
        resolution: u32,
    },

    #[error("manifest line {line}: feature file {path} is not readable: {reason}")]
    DanglingPath {
        line: usize,
        path: PathBuf,
        reason: String,
    },

    #[error("manifest line {line}: {path} has {found} channels, expected {expected}")]
    ChannelMismatch {
        line: usize,
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("manifest line {line}: relevance for {query} references unknown gallery id {id}")]
    DanglingRelevance {
        line: usize,
        query: String,
        id: String,
    },

    #[error("need at least {needed} samples, got {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("need at least {needed} distinct classes, got {available}")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("image {id} has no feature map at resolution {resolution}")]
    MissingFeature { id: String, resolution: u32 },

    #[error("query {0} has no relevance entry")]
    MissingRelevance(String),

    #[error("triplet mining produced an empty pool {attempts} times in a row")]
    EmptyTripletPool { attempts: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for errors caused by bad inputs (files, flags, manifests) rather
    /// than failures while running.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::EmptyTripletPool { .. })
    }
}
