use thiserror::Error;

/// Errors produced by problem construction, simulation and estimation.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("simulation diverged at step {step} (sample {sample_index})")]
    SimulationDiverged { step: u64, sample_index: u64 },

    #[error("degenerate estimate: {0}")]
    DegenerateEstimate(String),

    #[error("estimator unusable: {0}")]
    EstimatorUnusable(String),

    #[error("degenerate control variate: {0}")]
    DegenerateControl(String),

    #[error("indefinite Hessian (eigenvalues {eigenvalues:?}): {reason}")]
    IndefiniteHessian { eigenvalues: Vec<f64>, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
