use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("value out of representable range: {0}")]
    Range(String),

    #[error("series truncated too early: tail mass {tail:.3e} exceeds {limit:.3e} of the squared norm")]
    Truncation { tail: f64, limit: f64 },

    #[error("singular 3x3 system while assembling covariance block ({row}, {col}), t = {t}")]
    SingularBlock { row: usize, col: usize, t: f64 },

    #[error("matrix dimension {dim} exceeds the dense cap {cap}; use the Monte-Carlo or sketched route")]
    DenseCap { dim: usize, cap: usize },

    #[error("gegenbauer coefficient of the activation vanishes at degree {degree} ({value:.3e})")]
    VanishingCoefficient { degree: usize, value: f64 },

    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: usize },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::Shape {
        expected: expected.into(),
        got: got.into(),
    }
}
