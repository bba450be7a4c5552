//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by graph construction, network evaluation, training,
/// sampling and the file pipeline.
#[derive(Debug, Error)]
pub enum CpeError {
    /// Structural problems: cycles, unknown node ids, duplicate ids,
    /// role violations.
    #[error("structure error: {0}")]
    Structure(String),

    /// Dimension or shape mismatches between arrays and declared layouts.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid run or model configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or malformed artifacts (datasets, checkpoints, observations).
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values, divergence, or failed numeric procedures.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Bisection inversion could not bracket or converge.
    #[error("inversion error: {0}")]
    Inversion(String),

    /// Unknown benchmark task name.
    #[error("unknown task `{0}`")]
    UnknownTask(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// JSON or CSV (de)serialization failure.
    #[error("serialization error: {0}")]
    Serialization(String),
}

/// Failure category used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad configuration or model structure (exit code 2).
    Config,
    /// Missing or unreadable artifacts (exit code 3).
    Data,
    /// Numeric failures (exit code 4).
    Numeric,
}

impl CpeError {
    /// Classify the error for exit-code reporting.
    pub fn category(&self) -> ErrorCategory {
        match self {
            CpeError::Structure(_) | CpeError::Shape(_) | CpeError::Config(_) => {
                ErrorCategory::Config
            }
            CpeError::Data(_)
            | CpeError::UnknownTask(_)
            | CpeError::Io(_)
            | CpeError::Serialization(_) => ErrorCategory::Data,
            CpeError::Numeric(_) | CpeError::Inversion(_) => ErrorCategory::Numeric,
        }
    }

    /// Process exit code for this error.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            ErrorCategory::Config => 2,
            ErrorCategory::Data => 3,
            ErrorCategory::Numeric => 4,
        }
    }
}

impl From<serde_json::Error> for CpeError {
    fn from(e: serde_json::Error) -> Self {
        CpeError::Serialization(e.to_string())
    }
}

impl From<csv::Error> for CpeError {
    fn from(e: csv::Error) -> Self {
        CpeError::Serialization(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_map_to_exit_codes() {
        assert_eq!(CpeError::Config("x".into()).exit_code(), 2);
        assert_eq!(CpeError::Structure("x".into()).exit_code(), 2);
        assert_eq!(CpeError::Data("x".into()).exit_code(), 3);
        assert_eq!(CpeError::UnknownTask("x".into()).exit_code(), 3);
        assert_eq!(CpeError::Numeric("x".into()).exit_code(), 4);
        assert_eq!(CpeError::Inversion("x".into()).exit_code(), 4);
    }
}
