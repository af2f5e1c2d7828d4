use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("label {label} at row {row} is out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("{}: parse error at byte offset {offset}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("architecture mismatch: expected layer dims {expected:?}, found {found:?}")]
    Architecture {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(
        "non-finite training loss at epoch {epoch}, batch {batch} (lipschitz bound {lipschitz}, beta {beta})"
    )]
    Diverged {
        epoch: usize,
        batch: usize,
        lipschitz: f64,
        beta: f64,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse failure classes, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Io,
    Parse,
    Numeric,
    Contract,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Io => 2,
            ErrorClass::Parse => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Contract => 5,
        }
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } => ErrorClass::Io,
            Error::Parse { .. } | Error::Architecture { .. } => ErrorClass::Parse,
            Error::NonFinite { .. } | Error::Diverged { .. } => ErrorClass::Numeric,
            Error::Shape { .. } | Error::LabelOutOfRange { .. } | Error::Contract(_) => {
                ErrorClass::Contract
            }
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
