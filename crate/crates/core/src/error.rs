use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HoiError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid dims {0:?}: rank must be >= 1 and every extent >= 1")]
    InvalidDims(Vec<usize>),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("backward called before forward for op {0}")]
    BackwardBeforeForward(&'static str),
    #[error("degenerate ROI after clamping: [{x1}, {y1}, {x2}, {y2}] covers less than one feature cell")]
    DegenerateRoi { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("tensor format: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("validation: {0}")]
    Validation(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl HoiError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HoiError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        HoiError::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        HoiError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Numeric failures map to exit code 2, everything else to 1.
    pub fn is_numeric(&self) -> bool {
        matches!(self, HoiError::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, HoiError>;
