use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("structure ({r}, {c}) does not divide weight grid ({big_r}, {big_c})")]
    Indivisible {
        big_r: usize,
        big_c: usize,
        r: usize,
        c: usize,
    },

    #[error("non-finite value {value} at coordinate {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("malformed file at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("could not generate instance for rules [{rules}] after {attempts} attempts")]
    Infeasible { rules: String, attempts: usize },

    #[error("loss became NaN at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
