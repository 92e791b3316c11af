use thiserror::Error;

/// Errors surfaced by the workbench.
///
/// Validation errors (bad configuration, violated preconditions) are kept
/// separate from numerical failures so the CLI can map them to distinct exit
/// codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("numerical failure in {what}: {detail}")]
    Numerical { what: String, detail: String },

    #[error("solver did not converge after {iterations} sweeps (residual {residual:.3e}); the contraction condition analogous to (smallness of T^-1 K) is not met")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("albedo column {column} failed: {source}")]
    AlbedoColumn {
        column: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn numerical(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical {
            what: what.into(),
            detail: detail.into(),
        }
    }

    /// Exit code contract: 2 for validation problems, 3 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Precondition(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
