use std::path::PathBuf;

/// Every failure the workbench can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid cell parameterization: {0}")]
    Parameterization(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    /// Least-squares design matrix is (numerically) rank deficient.
    #[error("ill-conditioned design: smallest/largest singular value = {sv_ratio:e}")]
    Conditioning { sv_ratio: f64 },

    #[error("fit did not converge ({context}); best residual {best_residual:e}")]
    Fit {
        context: String,
        best_residual: f64,
    },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Training { epoch: usize },

    #[error("numerical failure at step {step}: {msg}")]
    Numerical { step: usize, msg: String },

    #[error("insufficient history: step {k} needs a window of {window}")]
    InsufficientHistory { k: usize, window: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("(A, C) pair is not observable")]
    Unobservable,

    #[error("malformed artifact: {0}")]
    Artifact(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
