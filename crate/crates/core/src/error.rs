use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UdacError>;

#[derive(Debug, Error)]
pub enum UdacError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0:?}")]
    Version(String),

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl UdacError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        UdacError::InvalidArgument(msg.into())
    }
}
