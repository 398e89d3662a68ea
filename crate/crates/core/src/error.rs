use std::io;

use thiserror::Error;

pub type Result<T, E = LddmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LddmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl LddmError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LddmError::NumericalOverflow(_) | LddmError::DegenerateSchedule(_) => 3,
            LddmError::Capacity(_) => 4,
            _ => 2,
        }
    }
}

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::LddmError::InvalidArgument(format!($($arg)*))
    };
}
pub(crate) use invalid;

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
