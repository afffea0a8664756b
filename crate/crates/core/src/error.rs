use alloc::string::String;

/// Errors raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("embedding vectors must have at least one coordinate")]
    EmptyVector,

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("set is empty")]
    EmptySet,

    #[error("label {label} is out of range for {class_count} classes")]
    LabelOutOfRange { label: u32, class_count: usize },

    #[error("label count {labels} does not match vector count {vectors}")]
    LabelCountMismatch { labels: usize, vectors: usize },

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("class {class} has no support samples")]
    MissingClass { class: usize },

    #[error("need at least {needed} distinct neighbours, only {available} available")]
    TooFewNeighbors { needed: usize, available: usize },

    #[error("LID estimate diverges: all neighbour distances are equal")]
    DivergentLid,

    #[error("no point produced a finite LID estimate")]
    LidFailed,

    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite activation in layer {layer} at iteration {iteration}")]
    NumericOverflow { layer: usize, iteration: usize },

    #[error("parameter shape mismatch: expected {expected} values, got {actual}")]
    ShapeMismatch { expected: usize, actual: usize },

    #[error("every ensemble member failed; last error: {0}")]
    AllMembersFailed(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
