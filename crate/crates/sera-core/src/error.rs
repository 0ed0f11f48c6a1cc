//! Error type shared by the whole crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type SeraResult<T> = Result<T, SeraError>;

/// Everything that can go wrong in the laboratory.
///
/// Variants are grouped by origin: domain violations (bad tokens, vocab
/// mismatches), configuration problems, data-file problems (which carry the
/// offending line number), and generation failures.
#[derive(Debug, Error)]
pub enum SeraError {
    /// A token id is outside the vocabulary contract for its position.
    #[error("invalid token {token} at position {position}: {reason}")]
    InvalidToken {
        token: u32,
        position: usize,
        reason: String,
    },

    /// Two policies that must share a vocabulary do not.
    #[error("vocabulary mismatch: {left} regular tokens vs {right}")]
    VocabMismatch { left: u32, right: u32 },

    /// A precondition on an argument failed.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A run configuration is unusable.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// An iteration index has no corresponding policy snapshots.
    #[error("iteration {t} out of range for a history of {len} snapshots")]
    IterationOutOfRange { t: usize, len: usize },

    /// Selection asked for more records than exist.
    #[error("cannot select top {k} of {n} records")]
    SelectionTooLarge { k: usize, n: usize },

    /// A prompt produced fewer than two distinct candidates.
    #[error("prompt {prompt_id} is degenerate: fewer than two distinct candidates")]
    DegeneratePrompt { prompt_id: u64 },

    /// Every prompt in a bootstrap round was degenerate.
    #[error("bootstrap produced no pairs: all {n_prompts} prompts degenerate")]
    AllPromptsDegenerate { n_prompts: usize },

    /// A loss or margin became non-finite during training.
    #[error("non-finite loss for pair {pair_id} at iteration {t}")]
    NonFiniteLoss { pair_id: u64, t: usize },

    /// Dataset generation could not reach the requested yield.
    #[error("dataset generation yielded {got} of {requested} pairs")]
    GenerationShortfall { got: usize, requested: usize },

    /// A data file failed structural validation.
    #[error("{path}:{line}: {reason}")]
    DataFormat {
        path: String,
        line: usize,
        reason: String,
    },

    /// An output path already exists and --force was not given.
    #[error("refusing to overwrite existing output {0} (pass --force)")]
    WouldOverwrite(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
