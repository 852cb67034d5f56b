//! Error taxonomy shared by the library and the CLI.
//!
//! Each variant maps to a distinct process exit code so scripted callers can
//! tell configuration mistakes from I/O trouble from a diverged run.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad or inconsistent configuration (unknown dataset id, invalid
    /// topology, non-increasing milestones, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Valid configuration, invalid runtime value (shape mismatch, label out
    /// of range, empty batch, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Dataset archives missing or corrupt.
    #[error("ingestion error: {0}")]
    Ingestion(String),

    /// File-level trouble outside dataset ingestion.
    #[error("file error: {0}")]
    File(String),

    /// Checkpoint or report encode/decode failure.
    #[error("serialization error: {0}")]
    Serialization(String),

    /// Training hit a non-finite loss.
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// Could not reach or talk to the classification service.
    #[error("transport error after {retries} attempt(s): {detail}")]
    Transport { detail: String, retries: usize },

    /// Malformed or oversized wire payload.
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Error {
    /// Stable exit code for the CLI. 0 is success; every variant is nonzero
    /// and distinct.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingestion(_) | Error::File(_) => 3,
            Error::Serialization(_) => 4,
            Error::Divergence { .. } => 5,
            Error::Transport { .. } => 6,
            Error::Protocol(_) => 7,
            Error::Domain(_) => 8,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::File(e.to_string())
    }
}
