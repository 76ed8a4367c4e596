use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("config validation failed: {0}")]
    InvalidConfig(String),

    #[error("pollutant {pollutant} has zero variance over the pooled history")]
    ZeroVariance { pollutant: &'static str },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable tag for each variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidConfig(_) => "invalid_config",
            Error::ZeroVariance { .. } => "zero_variance",
            Error::InsufficientData(_) => "insufficient_data",
            Error::OutOfBounds(_) => "out_of_bounds",
            Error::Parse(_) => "parse",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::GradCheck(_) => "grad_check",
            Error::Diverged(_) => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
