use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::StepId;

/// Errors produced anywhere in the induction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("step text is empty after normalization")]
    EmptyStep,

    #[error("no candidate documents")]
    NoDocuments,

    #[error("corpus contains no sequences")]
    EmptyCorpus,

    #[error("no item could be grounded")]
    EmptySequence,

    #[error("step {0} is not in the step library")]
    UnknownStep(StepId),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("could not produce a negative outside the valid set after {attempts} attempts")]
    NoValidNegative { attempts: usize },

    #[error("zero-norm vector in contrastive batch")]
    ZeroVector,

    #[error("step library is empty")]
    EmptyLibrary,

    #[error("no beam reached the end of sequence within {max_steps} steps")]
    NoCompletion { max_steps: usize },

    #[error("no paths to build a graph from")]
    EmptyInput,

    #[error("unsupported export format `{0}`")]
    UnsupportedFormat(String),

    #[error("need at least 2 sequences to split, got {0}")]
    TooFewSequences(usize),

    #[error("expected {expected} predictions, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("linear baseline requires source document step orders")]
    MissingLinearData,

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("embedding service error: {0}")]
    Embedding(String),

    #[error("bad config: {0}")]
    BadConfig(String),

    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable machine-readable name of the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::EmptyStep => "EmptyStep",
            Error::NoDocuments => "NoDocuments",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::EmptySequence => "EmptySequence",
            Error::UnknownStep(_) => "UnknownStep",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::NoValidNegative { .. } => "NoValidNegative",
            Error::ZeroVector => "ZeroVector",
            Error::EmptyLibrary => "EmptyLibrary",
            Error::NoCompletion { .. } => "NoCompletion",
            Error::EmptyInput => "EmptyInput",
            Error::UnsupportedFormat(_) => "UnsupportedFormat",
            Error::TooFewSequences(_) => "TooFewSequences",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::MissingLinearData => "MissingLinearData",
            Error::Invalid(_) => "Invalid",
            Error::Embedding(_) => "Embedding",
            Error::BadConfig(_) => "BadConfig",
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::Io { .. } => "Io",
            Error::Json { .. } => "Json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
