//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CraftError {
    /// Every particle carries zero mass: the raw log-weights were all -inf.
    #[error("degenerate ensemble at transition {transition}: all log-weights are -inf")]
    DegenerateWeights { transition: usize },

    /// A weight update produced NaN, which no downstream estimate can absorb.
    #[error("invalid log-weight at transition {transition}: {detail}")]
    InvalidLogWeight { transition: usize, detail: String },

    /// A loss, gradient, or normalizer left the finite range during training.
    #[error("non-finite {quantity} at transition {transition}, iteration {iteration}")]
    NonFinite {
        quantity: &'static str,
        transition: usize,
        iteration: usize,
    },

    /// A coupling pre-scale grew past the abort guard; the flow is diverging.
    #[error(
        "pre-scale overflow at transition {transition}, iteration {iteration}: \
         |s| = {value:.3e} exceeds {limit}"
    )]
    PreScaleOverflow {
        transition: usize,
        iteration: usize,
        value: f64,
        limit: f64,
    },

    /// An independence-proposal run failed twice in a row inside the outer chain.
    #[error("proposal run failed twice at chain step {step}: {detail}")]
    ProposalFailed { step: usize, detail: String },

    /// Config validation problems, all of them, one per line.
    #[error("configuration invalid:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CraftError>;
