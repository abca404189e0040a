//! Crate-wide error type.

use thiserror::Error;

use crate::training::RunManifest;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("degenerate batch: batch norm in train mode needs at least 2 examples, got {0}")]
    DegenerateBatch(usize),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("variable belongs to a tape generation that has been reset")]
    StaleVar,

    #[error("cannot linearize layer `{0}`")]
    Linearize(String),

    #[error("probe refused: layer `{0}` is non-linear, linearize the network first")]
    NonLinearProbe(String),

    #[error("class {class} has a degenerate weight column (norm {norm:e})")]
    DegenerateClass { class: usize, norm: f64 },

    #[error("classes without examples: {0:?}")]
    MissingClass(Vec<usize>),

    #[error("degenerate feature centers: every other center coincides with class {0}")]
    DegenerateCenters(usize),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("invalid record {index} (byte {offset}): {msg}")]
    Record { index: usize, offset: u64, msg: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize, manifest: Box<RunManifest> },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
