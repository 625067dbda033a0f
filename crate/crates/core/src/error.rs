use thiserror::Error;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("reward vector needs at least 2 entries, got {0}")]
    TooFewResponses(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("metric {metric} is not valid here: {reason}")]
    MetricKind {
        metric: &'static str,
        reason: &'static str,
    },
    #[error("context {context} out of range (policy has {contexts})")]
    ContextOutOfRange { context: usize, contexts: usize },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("policy shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("enumeration of {count} responses exceeds cap {cap}")]
    EnumerationCap { count: u128, cap: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("judge mismatch: {0}")]
    JudgeMismatch(String),
    #[error("overlapping prompt splits: prompt {0} appears twice")]
    OverlappingSplits(usize),
    #[error("missing series: {0}")]
    MissingSeries(&'static str),
    #[error("non-finite gradient at step {step} (iteration {iteration})")]
    NonFiniteGradient {
        step: usize,
        iteration: usize,
        batch: Option<String>,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
