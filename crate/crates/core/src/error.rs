use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({lat}, {lon}) lies outside the grid bounding box")]
    OutOfBounds { lat: f64, lon: f64 },

    #[error("MISSING is not a valid location here")]
    MissingLocation,

    #[error("location id {id} out of range for {n_locations} locations")]
    LocationOutOfRange { id: usize, n_locations: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("trajectory has {observed} observed slots, cannot mask {requested}")]
    InsufficientObserved { observed: usize, requested: usize },

    #[error("history is empty")]
    EmptyHistory,

    #[error("trajectory has no observed slots")]
    NoObservations,

    #[error("unknown stage `{0}` (expected historical_intra, current_intra, inter or generation)")]
    UnknownStage(String),

    #[error("ground truth location is not part of the ranking")]
    TruthNotRanked,

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable identifier, used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::OutOfBounds { .. } => "out_of_bounds",
            Error::MissingLocation => "missing_location",
            Error::LocationOutOfRange { .. } => "location_out_of_range",
            Error::InvalidConfig(_) => "invalid_config",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InsufficientObserved { .. } => "insufficient_observed",
            Error::EmptyHistory => "empty_history",
            Error::NoObservations => "no_observations",
            Error::UnknownStage(_) => "unknown_stage",
            Error::TruthNotRanked => "truth_not_ranked",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::GradCheckFailed(_) => "grad_check_failed",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
