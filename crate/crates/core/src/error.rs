use std::io;

/// Errors produced by the slade pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate direction: cannot normalize a zero vector")]
    DegenerateDirection,

    #[error("dead embedding: row {row} is all zeros before normalization")]
    DeadEmbedding { row: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid layer dimensions: {0}")]
    InvalidLayerDims(String),

    #[error("label {label} out of range for {classes} basis rows")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid cluster count k={k} for {samples} samples")]
    InvalidClusterCount { k: usize, samples: usize },

    #[error("distributions not separated: mu_pos={mu_pos} <= mu_neg={mu_neg}")]
    NotSeparated { mu_pos: f64, mu_neg: f64 },

    #[error("similarity statistics are not initialized")]
    UninitializedStats,

    #[error("empty gallery after excluding the query")]
    EmptyGallery,

    #[error("separation infeasible at this dim: {0}")]
    SeparationInfeasible(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Whether the error stems from bad user input (files, flags, config)
    /// rather than a failure while running the pipeline.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidLayerDims(_)
                | Error::InvalidConfig(_)
                | Error::InvalidDataset(_)
                | Error::Parse { .. }
                | Error::LabelOutOfRange { .. }
                | Error::InvalidClusterCount { .. }
                | Error::DimensionMismatch { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
