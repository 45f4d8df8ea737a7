//! Candidate-set pruning for two-stage ranking with certified error control.
//!
//! A retriever proposes a candidate pool per query and a reranker reorders
//! it. Pruning drops candidates whose calibrated retriever score falls below
//! a threshold before reranking. This crate picks that threshold on labelled
//! calibration data so that, with probability at least `1 - delta`, the
//! expected post-pruning loss stays at or below `alpha`.

pub mod bounds;
pub mod calibrate;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod synthetic;

pub use calibrate::{calibrate, CalibrationConfig, Calibrator, CorrectionMode, GridSpec, Selection};
pub use error::{Error, ErrorCategory, Result};
pub use metrics::Metric;
pub use model::{
    CalibrationResult, Candidate, Correction, Dataset, DatasetMeta, DocId, QueryRecord, RiskCurve,
    Threshold, TrialReport,
};
