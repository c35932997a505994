//! Error type shared by every module of the crate.
//!
//! Errors fall in two families: invalid input (a parameter outside its
//! admissible range, a critical length where a regular one is needed) and
//! numerical failure (a root finder that does not converge, a singular
//! linear system). The command-line front end maps them to distinct exit codes.

use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum KdvError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl KdvError {
    pub fn validation(msg: impl Into<String>) -> Self {
        KdvError::Validation(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        KdvError::Numerical(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            KdvError::Validation(_) => 2,
            KdvError::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, KdvError>;
