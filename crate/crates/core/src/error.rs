//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by dataset construction, model evaluation and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion produced no usable records ({rejected} rejected out of {total})")]
    NoUsableRecords { rejected: usize, total: usize },

    #[error("degenerate time range: t_min = t_max = {0}")]
    DegenerateTimeRange(f64),

    #[error("dataset contains no sequences")]
    EmptyDataset,

    #[error("empty test split: no sequence has test events")]
    EmptyTestSplit,

    #[error("sequence '{user_id}' has an empty training prefix")]
    EmptyTrainingPrefix { user_id: String },

    #[error("invalid sequence '{user_id}': {reason}")]
    InvalidSequence {
        user_id: String,
        reason: &'static str,
    },

    #[error("cannot fit {m} clusters from {n} medians")]
    TooFewMedians { m: usize, n: usize },

    #[error("cluster count must be at least 1")]
    ZeroClusters,

    #[error("cluster thresholds are not strictly increasing (tied medians at quantile cuts)")]
    DegenerateThresholds,

    #[error("category {category} out of vocabulary (|C| = {num_categories})")]
    CategoryOutOfRange {
        category: usize,
        num_categories: usize,
    },

    #[error("log-density undefined for non-positive value {0}")]
    NonPositiveSample(f64),

    #[error("non-finite value in {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite { what: String, step: Option<usize> },

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("vocabulary mismatch: model has {model} categories, dataset has {dataset}")]
    VocabMismatch { model: usize, dataset: usize },

    #[error("spatial-mode mismatch: model spatial = {model}, dataset spatial = {dataset}")]
    SpatialModeMismatch { model: bool, dataset: bool },

    #[error("cluster count mismatch: origin checkpoint has M = {origin}, target requested M = {target}")]
    ClusterCountMismatch { origin: usize, target: usize },

    #[error("origin checkpoint has no spatial flow; cannot transfer into a spatial target")]
    MissingSpatialAnchors,

    #[error("dimension mismatch for trunk warm start: origin ({origin_d}, {origin_h}, {origin_c}), target ({target_d}, {target_h}, {target_c})")]
    WarmStartMismatch {
        origin_d: usize,
        origin_h: usize,
        origin_c: usize,
        target_d: usize,
        target_h: usize,
        target_c: usize,
    },

    #[error("unsupported file version {got} (expected {expected})")]
    VersionMismatch { expected: u32, got: u32 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
