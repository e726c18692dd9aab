use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("attention mask row {0} is fully masked")]
    FullyMasked(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token id {token} is outside the vocabulary (size {vocab})")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("sequence length {len} exceeds the configured maximum {max}")]
    TooLong { len: usize, max: usize },

    #[error("missing saved forward values: {0}")]
    MissingSaved(String),

    #[error("causal misalignment: query position {query} is not covered by a cache of {cached} positions")]
    Causal { query: usize, cached: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid weights file: {0}")]
    Weights(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
