use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not symmetric: max |a_ij - a_ji| = {asymmetry:e}")]
    Symmetry { asymmetry: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid partition: {0}")]
    Partition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("parameter count {d} exceeds the dense Hessian cap {cap}")]
    Size { d: usize, cap: usize },

    #[error("group {group} of the reference point is zero; direction factors are undefined")]
    ZeroGroup { group: usize },

    #[error("outside the oracle domain: {0}")]
    Domain(String),

    #[error("group sign change of the gradient flow at t = {time}")]
    SignCrossing { time: f64 },

    #[error("structural error: {0}")]
    Structural(String),

    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: PathBuf,
        detail: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dim(context, expected, got));
    }
    Ok(())
}

pub(crate) fn check_finite(context: &str, values: &[f64]) -> Result<()> {
    if let Some(j) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "{context}: non-finite value {} at index {j}",
            values[j]
        )));
    }
    Ok(())
}
