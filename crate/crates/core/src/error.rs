use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the tensor engine, models, and data generators.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("checkpoint version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("no prior signal: water, degradation and sample priors are all disabled")]
    NoPriorSignal,
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
