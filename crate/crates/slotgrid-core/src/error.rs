//! Error type shared by all core operations.

use alloc::string::String;
use core::fmt;

/// Errors raised by core operations.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An operation received no usable input (e.g. no points inside the grid).
    EmptyInput(&'static str),
    /// Feature width or tensor shape does not match what the operation expects.
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    /// A grid, kernel, or config value violates its invariants.
    Invalid(String),
    /// A value that must be finite was NaN or infinite.
    NonFinite(&'static str),
    /// Scene generation could not satisfy the spec after bounded retries.
    InfeasibleScene(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::DimensionMismatch {
                context,
                expected,
                got,
            } => write!(f, "dimension mismatch in {context}: expected {expected}, got {got}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::InfeasibleScene(msg) => write!(f, "infeasible scene spec: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
