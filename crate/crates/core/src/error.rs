use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scene infeasible: could not place all instances with enough visible pixels after {rounds} resampling rounds")]
    SceneInfeasible { rounds: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("sample {sample}: {message}")]
    Sample { sample: usize, message: String },

    #[error("sample {sample}: label-map checksum mismatch")]
    ChecksumMismatch { sample: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("instance {instance} has no pixels in either layer")]
    EmptyInstance { instance: usize },

    #[error("non-finite loss at iteration {iteration} (term `{term}`)")]
    NonFinite {
        iteration: usize,
        term: &'static str,
    },

    #[error("class {class} has {count} instances but the embedding lattice holds only {capacity} at this dimension")]
    LatticeInfeasible {
        class: usize,
        count: usize,
        capacity: usize,
    },

    #[error(
        "prediction/dataset sample count mismatch: {predictions} predictions for {samples} samples"
    )]
    SampleCountMismatch { predictions: usize, samples: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl Error {
    /// Short stable identifier, used in machine-readable error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::SceneInfeasible { .. } => "scene_infeasible",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
            Error::FormatVersion { .. } => "format_version",
            Error::Sample { .. } => "sample",
            Error::ChecksumMismatch { .. } => "checksum_mismatch",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::EmptyInstance { .. } => "empty_instance",
            Error::NonFinite { .. } => "non_finite",
            Error::LatticeInfeasible { .. } => "lattice_infeasible",
            Error::SampleCountMismatch { .. } => "sample_count_mismatch",
            Error::Checkpoint(_) => "checkpoint",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
