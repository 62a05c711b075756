use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine.
///
/// Variants group into the process exit classes used by the CLI:
/// configuration problems, I/O and format problems, and contract
/// violations (shape, ordering, bounds and numerical preconditions).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code for this error class: 2 config, 3 I/O, 4 contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) | Error::Image(_) | Error::Format(_) => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)*)));
        }
    };
}

pub(crate) use ensure;
