use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("parameter outside the admissible region: {0}")]
    Inadmissible(String),
    #[error("optimization failed: {0}")]
    Optimization(String),
    #[error("statistic not defined: {0}")]
    Statistic(String),
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error comes from user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Domain(_) | Error::Shape(_) | Error::Input(_) | Error::Csv(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
