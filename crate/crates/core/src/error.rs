use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("size error: expected {expected} values, got {got}")]
    Size { expected: usize, got: usize },

    #[error("unsupported kernel: extent {0} (only odd cubic kernels are supported)")]
    UnsupportedKernel(usize),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("could not place structure for class {class} after {attempts} attempts")]
    Generation { class: usize, attempts: usize },

    #[error("weights were written for a different network configuration")]
    Compatibility,

    #[error("non-finite loss at epoch {epoch} (lr = {lr})")]
    NonFinite { epoch: usize, lr: f64 },

    #[error("gradient check failed for {op}: max relative error {error:.3e} > {tol:.1e}")]
    GradCheck { op: String, error: f64, tol: f64 },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
