use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed arguments: dimension mismatch, zero vectors, violated preconditions.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("query budget exhausted: {used} used, budget {budget}")]
    Budget { used: u64, budget: u64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A derived quantity exceeded its configured cap.
    #[error("resource limit: {param} = {value} exceeds cap {cap}")]
    Resource {
        param: &'static str,
        value: f64,
        cap: f64,
    },

    #[error("inconsistent result: {0}")]
    Inconsistency(String),

    #[error("transport error: {0}")]
    Transport(#[from] io::Error),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error with stage labels stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::input(format!(
            "dimension mismatch: expected {expected}, got {got}"
        )))
    }
}
