use thiserror::Error;

/// Unified error type for the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {file} line {line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    FeatureDimMismatch { expected: usize, got: usize },

    #[error("token not in vocabulary: {0:?}")]
    OutOfVocabulary(String),

    #[error("embedding norm below 1e-12; cannot normalize")]
    DegenerateEmbedding,

    #[error("vocabulary hash mismatch: checkpoint has {checkpoint}, dataset has {dataset}")]
    VocabMismatch { checkpoint: String, dataset: String },

    #[error("location {0} has no address; annotate or partition the dataset first")]
    MissingAddress(String),

    #[error("no street-level geocoding result")]
    NoStreetLevelResult,

    #[error("geocoding backend {0:?} is not available in this build")]
    UnsupportedBackend(String),

    #[error("location {0} lies outside every neighborhood polygon")]
    LocationOutsideNeighborhoods(String),

    #[error("street prior matches no candidate address")]
    PriorMatchesNoCandidates,

    #[error("metric reports were built from different query sets ({ours} vs {theirs})")]
    QuerySetMismatch { ours: String, theirs: String },

    #[error(
        "non-finite loss at epoch {epoch} batch {batch} \
         (address {address}, caption {caption}, geography {geography})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        address: f64,
        caption: f64,
        geography: f64,
    },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an io::Error with the path it occurred on.
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
