use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    /// Bad command line or scenario file. Exit status 2.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot read scenario {}: {source}", path.display())]
    ScenarioRead { path: PathBuf, source: std::io::Error },

    /// An experiment failed to complete. Exit status 1.
    #[error("run failed: {0}")]
    Run(#[from] qni_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::ScenarioRead { .. } => 2,
            _ => 1,
        }
    }
}

pub fn config(msg: impl Into<String>) -> LabError {
    LabError::Config(msg.into())
}

pub type LabResult<T> = std::result::Result<T, LabError>;
