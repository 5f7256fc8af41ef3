use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // data ingestion
    #[error("unknown IDX magic 0x{0:08x}")]
    UnknownMagic(u32),
    #[error("truncated IDX payload: header declares {declared} bytes, {available} available")]
    TruncatedPayload { declared: usize, available: usize },
    #[error("class {class} has {available} samples, {required} required")]
    InsufficientClassSamples {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    // sparse coding / dictionaries
    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),
    #[error("invalid sparse coding request: {0}")]
    InvalidSparsity(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    // ksvd
    #[error("need at least {required} learning samples, got {available}")]
    InsufficientSamples { available: usize, required: usize },
    #[error("atom {0} is not used by any signal")]
    UnusedAtom(usize),

    // discriminative measures
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("weights (alpha={alpha}, beta={beta}) are outside the simplex")]
    WeightOutOfSimplex { alpha: f64, beta: f64 },
    #[error("no discriminative atom for class {0}")]
    NoDiscriminativeAtom(usize),

    // das-ksvd
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("no discriminative atoms after {restarts} restarts in iteration {iteration}")]
    RestartLimitExceeded { iteration: usize, restarts: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // mlp
    #[error("non-finite loss at epoch {epoch}: {detail}")]
    NonFiniteLoss { epoch: usize, detail: String },

    // tuning / evaluation
    #[error("grid step {0} is not of the form 1/s for a positive integer s")]
    NonUnitFractionStep(f64),
    #[error("length mismatch: {0} labels vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("both error rates are degenerate (variance is zero)")]
    DegenerateVariance,

    // persistence
    #[error("bad magic in artifact file")]
    BadMagic,
    #[error("unsupported artifact version {0}")]
    UnsupportedVersion(u32),
    #[error("artifact checksum mismatch")]
    ChecksumMismatch,
    #[error("artifact kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },
    #[error("malformed artifact: {0}")]
    MalformedArtifact(String),

    // pipeline
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

/// Coarse classification of errors, e.g. for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Invalid parameters or configuration.
    Config,
    /// Missing, malformed or insufficient input data.
    Data,
    /// A numerical procedure failed.
    Numeric,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        use Error::*;
        match self.root() {
            InvalidSparsity(_) | WeightOutOfSimplex { .. } | InvalidParameter(_) | NonUnitFractionStep(_) | Json(_) => {
                ErrorCategory::Config
            }
            UnknownMagic(_)
            | TruncatedPayload { .. }
            | InsufficientClassSamples { .. }
            | InvalidDataset(_)
            | DimensionMismatch(_)
            | EmptyClass(_)
            | EmptyTrainingSet
            | InsufficientSamples { .. }
            | LengthMismatch(..)
            | BadMagic
            | UnsupportedVersion(_)
            | ChecksumMismatch
            | KindMismatch { .. }
            | MalformedArtifact(_)
            | Io { .. }
            | Csv(_) => ErrorCategory::Data,
            InvalidDictionary(_)
            | UnusedAtom(_)
            | NoDiscriminativeAtom(_)
            | RestartLimitExceeded { .. }
            | NonFiniteLoss { .. }
            | DegenerateVariance
            | Stage { .. } => ErrorCategory::Numeric,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
