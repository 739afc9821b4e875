use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{axis} coordinate {value} out of range 0..{extent}")]
    OutOfBounds {
        axis: char,
        value: usize,
        extent: usize,
    },

    #[error("invalid dimensions {0:?}: every axis must be at least 1")]
    InvalidDims([usize; 3]),

    #[error("shape mismatch: expected {expected} elements, found {found}")]
    ShapeMismatch { expected: usize, found: usize },

    #[error("dims mismatch: {left:?} vs {right:?}")]
    DimsMismatch { left: [usize; 3], right: [usize; 3] },

    #[error("parse error at byte {offset}: {kind}")]
    Parse { offset: usize, kind: ParseErrorKind },

    #[error("mask value {value} at index {index} is not 0 or 1")]
    InvalidMaskValue { index: usize, value: u8 },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} has no entry in the lesion table")]
    UnknownLabel { label: u32 },

    #[error(
        "non-finite loss at step {step} (loss {loss}, max |weight| {max_weight})"
    )]
    NumericalAbort {
        step: usize,
        loss: String,
        max_weight: f64,
    },

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadMagic,
    Truncated,
    BadHeader(String),
    DtypeMismatch { expected: &'static str, found: String },
    NonFinite,
    InvalidMaskValue(u8),
    TrailingBytes,
}

impl std::fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParseErrorKind::BadMagic => write!(f, "bad magic"),
            ParseErrorKind::Truncated => write!(f, "truncated payload"),
            ParseErrorKind::BadHeader(msg) => write!(f, "bad header: {msg}"),
            ParseErrorKind::DtypeMismatch { expected, found } => {
                write!(f, "dtype mismatch: expected {expected}, found {found}")
            }
            ParseErrorKind::NonFinite => write!(f, "non-finite value"),
            ParseErrorKind::InvalidMaskValue(v) => write!(f, "mask value {v} not in {{0,1}}"),
            ParseErrorKind::TrailingBytes => write!(f, "trailing bytes after payload"),
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for command-line use: 2 for invalid input or
    /// configuration, 3 for a numerical abort, 4 for I/O and file-format
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NumericalAbort { .. } => 3,
            Error::Io { .. } | Error::Parse { .. } | Error::Csv(_) => 4,
            _ => 2,
        }
    }
}
