use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("spectral violation: {0}")]
    SpectralViolation(String),

    #[error("bad parameter: {0}")]
    BadParam(String),

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("numerical divergence at step {step}: {reason}")]
    NumericalDivergence { step: u64, reason: String },

    #[error("records are on different grids: {0}")]
    GridMismatch(String),

    #[error("enumeration too large: {sequences} noise sequences exceed the limit of {limit}")]
    TooLarge { sequences: u128, limit: u128 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("bad regime: {0}")]
    BadRegime(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
