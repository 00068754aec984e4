//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape mismatch; names the offending axis where it is known.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Illegal state transition (tape reuse, overlapping in-flight steps).
    #[error("state error: {0}")]
    State(String),

    /// Protocol violation between client and server runtimes.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Malformed wire frame; `offset` is the byte position of the fault.
    #[error("decode error at offset {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    /// Invalid caller-supplied value.
    #[error("input error: {0}")]
    Input(String),

    /// Non-finite value surfaced during numeric work.
    #[error("numeric error in {0}: non-finite value")]
    NonFinite(String),

    /// Configuration failed validation; names the key path.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
