use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report.
///
/// Input problems (shapes, malformed files, bad configuration) map to exit
/// code 2 on the command line; numerical failures map to exit code 3.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate vector: {0}")]
    DegenerateVector(String),

    #[error("zero row at index {row}")]
    ZeroRow { row: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sinkhorn diverged at iteration {iteration}")]
    SinkhornDiverged { iteration: usize },

    #[error("gradient requires converged plan (violation {violation:e} > tolerance {tolerance:e})")]
    NotConverged { violation: f64, tolerance: f64 },

    #[error("oracle limit exceeded: n = {n}, maximum is {max}")]
    OracleLimitExceeded { n: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SinkhornDiverged { .. } | Error::NotConverged { .. } | Error::NonFinite(_)
        )
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            3
        } else {
            2
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            message: err.to_string(),
        }
    }
}
