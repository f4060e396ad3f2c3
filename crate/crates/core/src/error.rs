use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an op's contract. Carries both shapes.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A token id is outside the configured vocabulary.
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },

    /// A position is outside `[0, max_position)` or collides with the range
    /// reserved for a cache prefix.
    #[error("position error: {0}")]
    Position(String),

    /// An invalid model or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an API contract (frozen flags, mask lengths,
    /// permutation arguments, non-scalar backward roots, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A checkpoint could not be parsed (bad magic, version, truncation).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A data file could not be parsed. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shapes(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
