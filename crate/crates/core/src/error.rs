use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite operand {raw:#06x} at index {index}")]
    NonFinite { index: usize, raw: u16 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("dot product of {0} terms exceeds the exact accumulator limit of 4096")]
    DotTooLong(usize),

    #[error("exponent code {0} is outside [0, 31]")]
    ExponentOutOfRange(u32),

    #[error("{0}")]
    EmptyInput(&'static str),

    #[error("exponent {e_in} exceeds alignment target {e_max}")]
    ShiftUnderflow { e_in: u8, e_max: u8 },

    #[error("reserved group flag 0b11")]
    ReservedFlag,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid bimodal spec: {0}")]
    InvalidSpec(String),

    #[error("baseline cycle count is zero")]
    ZeroBaseline,

    #[error("{path}: malformed header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: unknown dtype {dtype:?}")]
    UnknownDtype { path: PathBuf, dtype: String },

    #[error("{path}: payload is {actual} bytes, header implies {expected}")]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
