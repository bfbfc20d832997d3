use thiserror::Error;

/// Errors raised by the inference engines and the ingestion layer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("innovation covariance is numerically singular at t={t} (condition estimate {condition:.3e})")]
    SingularInnovation { t: usize, condition: f64 },

    #[error("transition is not Schur-stable (spectral radius {0})")]
    NonStationary(f64),

    #[error("EM objective decreased by {drop:.3e} at iteration {iteration}")]
    NonMonotone { iteration: usize, drop: f64 },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("malformed input at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("MCMC iteration {iteration}: {source}")]
    Chain {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NotPositiveDefinite(_)
            | Error::SingularInnovation { .. }
            | Error::NonStationary(_)
            | Error::NonMonotone { .. } => true,
            Error::Chain { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
