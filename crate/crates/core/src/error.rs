use thiserror::Error;

/// Errors raised by ingestion, calibration, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate entry for query {query_id}, document {doc_id}")]
    Duplicate { query_id: String, doc_id: String },

    #[error("duplicate query id {0}")]
    DuplicateQuery(String),

    #[error("reranker score for unknown candidate (query {query_id}, document {doc_id})")]
    UnknownCandidate { query_id: String, doc_id: String },

    #[error("query {query_id} has candidates without a fused score; run fusion first")]
    MissingFusedScore { query_id: String },

    #[error("labels are all one class; skip calibration scaling for this data")]
    OneClassLabels,

    #[error("invalid {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("loss at position {index} is {value}, outside [0, 1]")]
    LossOutOfRange { index: usize, value: f64 },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("{0}")]
    Config(String),

    #[error("snapshot: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Coarse category used by front ends to pick exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Io(_) => ErrorCategory::Io,
            Error::Parse { .. }
            | Error::Duplicate { .. }
            | Error::DuplicateQuery(_)
            | Error::Json(_)
            | Error::Csv(_) => ErrorCategory::Parse,
            _ => ErrorCategory::Domain,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(name: &'static str, value: f64, reason: &'static str) -> Self {
        Error::InvalidParameter {
            name,
            value,
            reason,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Io,
    Parse,
    Domain,
}

impl ErrorCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCategory::Io => "io",
            ErrorCategory::Parse => "parse",
            ErrorCategory::Domain => "domain",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
