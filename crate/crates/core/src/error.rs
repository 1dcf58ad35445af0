use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed audio file: {0}")]
    WavFormat(String),

    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("waveform too short: need at least {needed} samples, got {got}")]
    TooShort { needed: usize, got: usize },

    #[error("feature file magic mismatch: expected \"ADIF\", found {found:?}")]
    AdifMagic { found: [u8; 4] },

    #[error("unsupported feature file version {0}")]
    AdifVersion(u8),

    #[error("unknown feature source code {0}")]
    AdifSource(u8),

    #[error("feature file truncated: expected {expected} bytes, found {found}")]
    AdifTruncated { expected: usize, found: usize },

    #[error("feature file has {extra} trailing bytes after the payload")]
    AdifTrailing { extra: usize },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch normalization needs at least 2 examples in training mode, got {0}")]
    DegenerateBatch(usize),

    #[error("noise has zero power")]
    DegenerateNoise,

    #[error("signal has zero power")]
    DegenerateSignal,

    #[error("no scored utterances")]
    EmptyEvaluation,

    #[error("cannot normalize a zero-norm vector")]
    Normalization,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint magic mismatch")]
    CheckpointMagic,

    #[error("unsupported checkpoint version {0}")]
    CheckpointVersion(u32),

    #[error("checkpoint truncated at byte {offset}: wanted {wanted} more bytes")]
    CheckpointTruncated { offset: usize, wanted: usize },

    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint holds a {found} model, expected {expected}")]
    KindMismatch { expected: String, found: String },

    #[error("cohort store: {0}")]
    CohortFormat(String),

    #[error("manifest {path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
