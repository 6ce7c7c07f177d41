use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm is at or below the zero threshold")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("cannot average an empty list of embeddings")]
    EmptyList,

    #[error("embedding contains a non-finite component at index {0}")]
    NonFinite(usize),

    #[error("fusion weight {0} is outside [0, 1]")]
    InvalidWeight(f64),

    #[error("no template registered for target `{target}` with augment `{augment}`")]
    UnknownTemplate { target: String, augment: String },

    #[error("unknown axis `{0}`")]
    UnknownAxis(String),

    #[error("unknown value `{value}` for axis `{axis}`")]
    UnknownAxisValue { axis: String, value: String },

    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),

    #[error("backend `{backend}` unavailable after {attempts} attempt(s): {detail}")]
    BackendUnavailable {
        backend: String,
        detail: String,
        attempts: u32,
    },

    #[error("backend `{0}` cannot generate images")]
    GenerationUnsupported(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("prototype set is empty")]
    EmptyPrototypeSet,

    #[error("no labeled queries to evaluate")]
    NoQueries,

    #[error("missing prototype for class `{0}`")]
    MissingPrototype(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("no rows carry a label for axis `{0}`")]
    NoLabeledRows(String),

    #[error("cache miss for {0}")]
    CacheMiss(String),

    #[error("cache key {0} already holds a different payload")]
    PayloadConflict(String),

    #[error("empty input")]
    EmptyInput,

    #[error("predictions ({predictions}) and labels ({labels}) differ in length")]
    LengthMismatch { predictions: usize, labels: usize },

    #[error("unknown report format `{0}`")]
    UnknownFormat(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
