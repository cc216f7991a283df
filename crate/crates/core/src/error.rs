use std::path::PathBuf;

/// Errors raised anywhere in the model, data and evaluation stack.
///
/// Display strings are part of the CLI contract: the command-line tool prints
/// them verbatim as its one-line error message.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input too short: {samples} samples, need at least {needed}")]
    InputTooShort { samples: usize, needed: usize },

    #[error("invalid waveform: non-finite sample at index {0}")]
    InvalidWaveform(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("aif unavailable: {0}")]
    AifUnavailable(String),

    #[error("invalid aif shape: expected {expected} columns, got {got}")]
    InvalidAifShape { expected: usize, got: usize },

    #[error("unrecognized {kind} file: {reason}")]
    UnrecognizedFile { kind: &'static str, reason: String },

    #[error("empty reference")]
    EmptyReference,

    #[error("unpaired batch: {speakers} speaker rows vs {emotions} emotion rows")]
    UnpairedBatch { speakers: usize, emotions: usize },

    #[error("invalid class label {label} for {n_classes} classes")]
    InvalidClassLabel { label: usize, n_classes: usize },

    #[error("gc channel mismatch: block has {expected} channels, input has {got}")]
    GcChannelMismatch { expected: usize, got: usize },

    #[error("conditioning dim mismatch: {0}")]
    ConditioningDimMismatch(String),

    #[error("loss shape mismatch: {0}")]
    LossShapeMismatch(String),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(&'static str),

    #[error("loss decomposition mismatch: {0}")]
    LossDecomposition(String),

    #[error("gradient overflow: {0}")]
    GradientOverflow(String),

    #[error("unknown speaker {id} (table has {n_speakers} rows)")]
    UnknownSpeaker { id: usize, n_speakers: usize },

    #[error("unknown emotion label {0:?}")]
    UnknownEmotionLabel(String),

    #[error("invalid token {token} for vocabulary of {vocab}")]
    InvalidToken { token: usize, vocab: usize },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("teacher forcing requires target frames")]
    MissingTargets,

    #[error("degenerate probe: {0}")]
    DegenerateProbe(String),

    #[error("mismatched evaluation: {0}")]
    MismatchedEvaluation(String),

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("io failure: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
