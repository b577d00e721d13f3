//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// Variants are grouped by the failing contract rather than by module so that
/// callers (notably the CLI) can map them to exit codes: configuration and
/// usage problems vs. environment/IO problems.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: expected scalar, got tensor of shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("{op}: empty input sequence")]
    EmptySequence { op: &'static str },

    #[error("invalid tensor: shape {shape:?} implies {expected} values, got {actual}")]
    BadTensorData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered in {op}")]
    NonFinite { op: &'static str },

    #[error("gloss id {id} outside vocabulary (K = {vocab_size})")]
    VocabId { id: usize, vocab_size: usize },

    #[error("no gradient defined: target infeasible for {frames} frames")]
    InfeasibleTarget { frames: usize },

    #[error("enumeration bound exceeded: T'={frames}, K={vocab_size} (limits T'<=8, K<=4)")]
    EnumerationBound { frames: usize, vocab_size: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint required: {0}")]
    CheckpointRequired(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("feature file {path}: expected {expected} bytes, got {actual}")]
    TruncatedFeatures {
        path: String,
        expected: u64,
        actual: u64,
    },

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint corrupted: {0}")]
    CheckpointCorrupt(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or usage, as opposed to
    /// the environment (IO, corrupt files).
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::VocabId { .. }
                | Error::EnumerationBound { .. }
                | Error::CheckpointRequired(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
