use alloc::string::String;

use thiserror::Error;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: [usize; 2],
        right: [usize; 2],
    },

    #[error("{op}: empty axis in shape {shape:?}")]
    EmptyAxis { op: &'static str, shape: [usize; 2] },

    #[error("{op}: value {value} at index {index} is outside the domain")]
    Domain {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("l2 normalization of a vector with norm {norm:e}")]
    Degenerate { norm: f64 },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("usage: {0}")]
    Usage(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("labels: {0}")]
    Label(String),

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("analysis: {0}")]
    Analysis(String),

    #[error("training diverged at epoch {epoch}, step {step}: {what}")]
    Divergence {
        epoch: usize,
        step: usize,
        what: &'static str,
    },
}
