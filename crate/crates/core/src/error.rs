use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("columns are rank deficient (column {column} residual {residual:.3e})")]
    RankDeficient { column: usize, residual: f64 },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("bad range: {0}")]
    BadRange(String),

    #[error("index {index} out of range 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("covariance is numerically singular")]
    SingularCovariance,

    #[error("expected a single-component Gaussian")]
    NotSingleGaussian,

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("matrix is not positive semi-definite (min eigenvalue {0:.3e})")]
    NotPsd(f64),

    #[error("dimension {dim} exceeds the dense limit {limit}")]
    DimTooLarge { dim: usize, limit: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training loss diverged at step {0}")]
    DivergedLoss(usize),

    #[error("model parameters are not finite")]
    NonFiniteParameters,

    #[error("denoiser returned a non-finite output")]
    NonFiniteDenoiserOutput,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("feature layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("need at least two timesteps")]
    TooFewTimesteps,

    #[error("this statistic requires an analytic model")]
    AnalyticModelRequired,

    #[error("input is empty")]
    EmptyInput,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Process exit code: 2 for bad input or configuration, 3 for I/O,
    /// 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 3,
            Error::RankDeficient { .. }
            | Error::NonFinite(_)
            | Error::SingularCovariance
            | Error::NotPsd(_)
            | Error::DivergedLoss(_)
            | Error::NonFiniteParameters
            | Error::NonFiniteDenoiserOutput => 4,
            _ => 2,
        }
    }
}
