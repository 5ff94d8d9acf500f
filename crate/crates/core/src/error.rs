use thiserror::Error;

/// Broad classes of failure, used by front-ends to choose exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Bad input: arguments, configuration, files.
    Input,
    /// A numerical procedure failed (factorization, root finding).
    Numerical,
    /// The requested statistic is undefined or unreliable for these data.
    Degenerate,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible perturbation: {0}")]
    Infeasible(String),

    #[error("no convergence: {0}")]
    NoConvergence(String),

    #[error("covariance matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("too many simulation points ({points} > {limit}); use blocked simulation")]
    TooManyPoints { points: usize, limit: usize },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error(
        "perturbation too far in the tail, increase n or reduce delta \
         (effective sample size {n_eff:.1} < {min})"
    )]
    WeightDegeneracy { n_eff: f64, min: f64 },

    #[error("probability {p} is never reached (maximum attained {max_attained})")]
    LevelNotReached { p: f64, max_attained: f64 },

    #[error("{fraction:.3} of samples never cross probability {p} (limit 0.05)")]
    NoCrossing { p: f64, fraction: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_)
            | Error::Infeasible(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorClass::Input,
            Error::NoConvergence(_) | Error::NotPositiveDefinite(_) | Error::TooManyPoints { .. } => {
                ErrorClass::Numerical
            }
            Error::DegenerateVariance(_)
            | Error::WeightDegeneracy { .. }
            | Error::LevelNotReached { .. }
            | Error::NoCrossing { .. } => ErrorClass::Degenerate,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
