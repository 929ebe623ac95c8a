use std::io;

use thiserror::Error;

/// Errors surfaced by every module of the crate.
///
/// Messages are prefixed with the owning module so that the CLI can report
/// them without extra context.
#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: cannot normalize a zero vector (norm {norm:e})")]
    ZeroVector { norm: f64 },

    #[error("geometry: dimension mismatch (expected {expected}, got {got})")]
    DimMismatch { expected: usize, got: usize },

    #[error("model: invalid config: {0}")]
    InvalidConfig(String),

    #[error("model: shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("model: corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("loss: triplet index {index} out of range for batch of {batch}")]
    IndexOutOfRange { index: usize, batch: usize },

    #[error("mining: need {needed} identities, dataset has {available}")]
    InsufficientIdentities { needed: usize, available: usize },

    #[error("mining: insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("mining: batch has no negatives (single identity)")]
    NoNegatives,

    #[error("trainer: collapse detected at step {step} (mean output norm {mean_norm:e})")]
    CollapseDetected { step: usize, mean_norm: f64 },

    #[error("trainer: invalid config: {0}")]
    InvalidTrainConfig(String),

    #[error("eval: empty pair set ({0})")]
    EmptyPairSet(&'static str),

    #[error("eval: missing distance for pair ({0}, {1})")]
    MissingDistance(usize, usize),

    #[error("eval: empty report")]
    EmptyReport,

    #[error("eval: bad fold partition: {0}")]
    BadPartition(String),

    #[error("harmonic: missing embedding for sample {0}")]
    MissingEmbedding(usize),

    #[error("harmonic: full-network stage requested before any last-layer steps")]
    StageOrderViolation,

    #[error("cluster: empty input")]
    EmptyInput,

    #[error("cluster: label mismatch ({predicted} predicted vs {truth} truth)")]
    LabelMismatch { predicted: usize, truth: usize },

    #[error("dataio: invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("dataio: need at least 2 identities to split, got {0}")]
    TooFewIdentities(usize),

    #[error("dataio: corrupt file: {0}")]
    CorruptFile(String),

    #[error("dataio: parse error: {0}")]
    Parse(String),

    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
