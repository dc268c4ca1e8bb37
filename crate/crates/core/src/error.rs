use thiserror::Error;

/// Errors raised anywhere in the estimation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("problem has no observations")]
    EmptyProblem,
    #[error("factor graph is disconnected: {0}")]
    DisconnectedGraph(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("matrix is not symmetric positive definite: {0}")]
    NonPositiveDefinite(String),
    #[error("linear algebra failure: {0}")]
    LinearAlgebraFailure(String),
    #[error("expected {expected} weights, got {got}")]
    WeightCountMismatch { expected: usize, got: usize },
    #[error("negative input: {0}")]
    NegativeInput(f64),
    #[error("too few points: {0}")]
    TooFewPoints(String),
    #[error("non-finite data: {0}")]
    NonFiniteData(String),
    #[error("eigen-decomposition failed: {0}")]
    EigenFailure(String),
    #[error("degenerate design matrix: {0}")]
    DegenerateDesign(String),
    #[error("feature names differ between observations: {0}")]
    FeatureNameMismatch(String),
    #[error("residual pairing failed: {0}")]
    PairingError(String),
    #[error("no residual group survived partitioning")]
    EmptyPartition,
    #[error("partition does not cover every measurement row: {0}")]
    CoverageGap(String),
    #[error("mode {mode} is missing required configuration: {reason}")]
    ModeConfigMismatch { mode: String, reason: String },
    #[error("scenario is not observable: {0}")]
    ObservabilityError(String),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty series")]
    EmptySeries,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
