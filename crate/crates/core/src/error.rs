use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("PLY parse error at {location}: {message}")]
    Ply { location: String, message: String },

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("point set is rank deficient ({0})")]
    RankDeficient(&'static str),

    #[error("local reference frame x-axis is degenerate")]
    DegenerateFrame,

    #[error("insufficient support: {got} points within radius, need {needed}")]
    InsufficientSupport { needed: usize, got: usize },

    #[error("point {0} has no normal")]
    MissingNormal(usize),

    #[error("all mixture components collapsed")]
    AllComponentsCollapsed,

    #[error("both regional mixtures are absent")]
    EmptyDescriptor,

    #[error("alignment failed: {0}")]
    AlignmentFailed(String),

    #[error("no correspondences within {0}")]
    NoCorrespondences(f64),

    #[error("no valid bounding box for local plane angles")]
    NoValidBox,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable code, used when a keypoint is skipped.
    pub fn reason_code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Ply { .. } => "ply",
            Error::InvalidCloud(_) => "invalid-cloud",
            Error::TooFewPoints { .. } => "too-few-points",
            Error::RankDeficient(_) => "rank-deficient",
            Error::DegenerateFrame => "degenerate-frame",
            Error::InsufficientSupport { .. } => "insufficient-support",
            Error::MissingNormal(_) => "missing-normal",
            Error::AllComponentsCollapsed => "em-collapse",
            Error::EmptyDescriptor => "empty-descriptor",
            Error::AlignmentFailed(_) => "alignment-failed",
            Error::NoCorrespondences(_) => "no-correspondences",
            Error::NoValidBox => "no-valid-box",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Stage { source, .. } => source.reason_code(),
        }
    }

    /// Tags an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
