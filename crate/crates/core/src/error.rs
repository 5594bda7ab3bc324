use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("absolute continuity violated: target probability {target_prob} with logging probability 0")]
    AbsoluteContinuity { target_prob: f64 },

    #[error("probability {0} outside [0, 1]")]
    InvalidProbability(f64),

    #[error("probability vector sums to {sum}, expected 1 within 1e-9")]
    ProbabilitySum { sum: f64 },

    #[error("policy returned {got} probabilities for {expected} actions")]
    PolicyArity { expected: usize, got: usize },

    #[error("action {action} out of range for {num_actions} actions")]
    ActionOutOfRange { action: usize, num_actions: usize },

    #[error("logging probability {0} must lie in (0, 1]")]
    InvalidPropensity(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid threshold {0}")]
    InvalidThreshold(f64),

    #[error("capped importance weights sum to zero; self-normalized estimate undefined")]
    DegenerateNormalizer,

    #[error("no context-action pair has a positive importance weight")]
    NoPositiveWeight,

    #[error("reward {0} is not binary; logistic reward models need rewards in {{0, 1}}")]
    NonBinaryReward(f64),

    #[error("need at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },

    #[error("invalid instance: {0}")]
    InvalidInstance(String),

    #[error("{0}")]
    Domain(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("labels must be contiguous 0..K; {0}")]
    LabelRange(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("replicate failed (dataset {dataset}, n {n}, replicate {replicate}, seed {seed:#018x}): {source}")]
    Replicate {
        dataset: String,
        n: usize,
        replicate: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidProbability(_)
                | Error::ProbabilitySum { .. }
                | Error::PolicyArity { .. }
                | Error::ActionOutOfRange { .. }
                | Error::InvalidPropensity(_)
                | Error::NonFinite(_)
                | Error::Empty(_)
                | Error::DimensionMismatch { .. }
                | Error::InvalidThreshold(_)
                | Error::NonBinaryReward(_)
                | Error::InvalidInstance(_)
                | Error::Parse { .. }
                | Error::LabelRange(_)
                | Error::Config(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
