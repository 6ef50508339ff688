use std::fmt;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("element index {index} out of range for a {count}-element probe")]
    ElementIndex { index: usize, count: usize },

    #[error("pixel depth must be positive, got {0} m")]
    NonPositiveDepth(f64),

    #[error("memory budget exceeded: {what} needs {needed_mb:.1} MB, budget is {budget_mb:.1} MB")]
    MemoryBudget {
        what: &'static str,
        needed_mb: f64,
        budget_mb: f64,
    },

    #[error("system matrix is empty: no pixel echo falls inside the recorded time window")]
    EmptyMatrix,

    #[error("{} pixel(s) have an empty receive aperture (first: {:?})", .pixels.len(), &.pixels[..(.pixels.len().min(8))])]
    EmptyAperture { pixels: Vec<usize> },

    #[error("factorization did not converge: {0}")]
    NonConvergence(String),

    #[error("factorization residual {residual:.3e} above tolerance {tol:.3e}")]
    ResidualTooLarge { residual: f64, tol: f64 },

    #[error("non-finite values at step {step}: {count} coordinate(s)")]
    NonFinite { step: usize, count: usize },

    #[error("denoiser protocol violation: {0}")]
    Protocol(String),

    #[error("denoiser timed out after {0} ms")]
    Timeout(u64),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("missing region '{0}'")]
    MissingRegion(String),

    #[error("dataset '{0}' not found in input file")]
    MissingDataset(String),

    #[error("unsupported data: {0}")]
    Unsupported(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonConvergence(_)
            | Error::ResidualTooLarge { .. }
            | Error::NonFinite { .. }
            | Error::EmptyMatrix
            | Error::Degenerate(_) => ErrorKind::Numerical,
            Error::Io(_) | Error::MissingDataset(_) | Error::Format(_) | Error::Protocol(_) | Error::Timeout(_) => {
                ErrorKind::Io
            }
            _ => ErrorKind::Validation,
        }
    }

    pub(crate) fn config(msg: impl fmt::Display) -> Self {
        Error::Config(msg.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        });
    }
    Ok(())
}
