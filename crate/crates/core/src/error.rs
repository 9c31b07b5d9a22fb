use thiserror::Error;

/// Errors for conditions that depend on data rather than on caller bugs.
/// Contract violations (shape mismatches on internal ops, out-of-range
/// indices) panic instead; they indicate a programming error.
#[derive(Debug, Error)]
pub enum CoreError {
    /// No alignment of the target fits in the given output length.
    #[error("ctc: no feasible alignment for target of length {target_len} within {output_len} output positions")]
    CtcInfeasible { target_len: usize, output_len: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
