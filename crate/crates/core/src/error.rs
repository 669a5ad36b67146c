use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid skeleton: {0}")]
    Skeleton(String),
    #[error("left-hip, right-hip and neck are collinear; facing direction undefined")]
    DegenerateFace,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid occlusion mode {0:?}")]
    OcclusionMode(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("missing ground truth for sample {0}")]
    MissingGroundTruth(usize),
    #[error("sample {0} is not in the pseudo-label set")]
    NotPseudoLabelled(usize),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Net(#[from] netcore::NetError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
