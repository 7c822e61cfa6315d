use thiserror::Error;

/// Errors raised by ingestion, estimation and the command-line driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("schema: column `{0}` not found in input header")]
    MissingColumn(String),
    #[error("row {row}: {msg}")]
    Domain { row: usize, msg: String },
    #[error("row {row}: {msg}")]
    Consistency { row: usize, msg: String },
    #[error("invalid data: {0}")]
    Validation(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("no convergence after {iterations} iterations (last score norm {score_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        score_norm: f64,
        last: Vec<f64>,
    },
    #[error("estimation failed: {0}")]
    Estimation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::MissingColumn(_)
            | Error::Domain { .. }
            | Error::Consistency { .. }
            | Error::Validation(_)
            | Error::Io(_)
            | Error::Csv(_) => 2,
            Error::Singular(_)
            | Error::NonConvergence { .. }
            | Error::Estimation(_)
            | Error::Numeric(_) => 3,
        }
    }
}
