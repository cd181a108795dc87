use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON in {what}")]
    Json {
        what: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("CSV error")]
    Csv(#[from] csv::Error),

    #[error("invalid graph at layer {layer:?}: {msg}")]
    Validation { layer: Option<u32>, msg: String },

    #[error("policy has no {what} entry for tensor {id}")]
    MissingPolicyEntry { what: &'static str, id: u32 },

    #[error("budget infeasible: {0}")]
    Infeasible(String),

    #[error("invalid bitwidth {0} (expected 2, 4, 8 or 32)")]
    InvalidBits(u32),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("value {value} does not fit a {bits}-bit {kind} field")]
    OutOfRange {
        value: i32,
        bits: u32,
        kind: &'static str,
    },

    #[error("degenerate scale configuration: {0}")]
    DegenerateScale(String),

    #[error("32-bit accumulator overflow in layer {layer}")]
    AccumulatorOverflow { layer: u32 },

    #[error("model does not match graph: {0}")]
    ModelMismatch(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("insufficient samples: requested {requested}, available {available}")]
    InsufficientSamples { requested: usize, available: usize },

    #[error("training diverged: loss is NaN at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: usize },

    #[error("bad binary format: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(layer: impl Into<Option<u32>>, msg: impl Into<String>) -> Self {
        Error::Validation {
            layer: layer.into(),
            msg: msg.into(),
        }
    }
}
