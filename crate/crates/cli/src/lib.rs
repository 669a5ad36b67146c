//! Experiment configuration and the commands behind the `mrp` binary.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;

use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("missing file: {0}")]
    MissingFile(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::MissingFile(_) => "missing_file",
            CliError::Invariant(_) => "invariant",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() })
            .to_string()
    }

    pub fn from_io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::MissingFile(path.display().to_string())
        } else {
            CliError::Runtime(format!("{}: {e}", path.display()))
        }
    }
}

impl From<mrp_core::Error> for CliError {
    fn from(e: mrp_core::Error) -> Self {
        use mrp_core::Error as E;
        match e {
            E::Config(_) | E::Skeleton(_) | E::OcclusionMode(_) => CliError::Config(e.to_string()),
            E::Io {
                ref source,
                ref path,
            } if source.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingFile(path.display().to_string())
            }
            E::Invariant(_)
            | E::Shape(_)
            | E::DegenerateFace
            | E::MissingGroundTruth(_)
            | E::Json(_) => CliError::Invariant(e.to_string()),
            E::Net(netcore::NetError::Io(ref io)) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::MissingFile(e.to_string())
            }
            E::Net(_) => CliError::Invariant(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
