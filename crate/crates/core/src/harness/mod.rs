//! Experiment driver: configuration, seeded substreams, run directories
//! with manifests, the preset runners and cross-run comparison.

use std::path::Path;

pub mod artifacts;
pub mod compare;
pub mod config;
pub mod runner;
pub mod seeds;
pub mod stats;

pub use artifacts::{RunDir, RunManifest};
pub use compare::{compare_runs, Comparison};
pub use config::{ExperimentConfig, Preset};
pub use runner::{run, run_online, RunSummary};
pub use seeds::{Seeds, Stream};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Bad configuration or arguments.
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 for configuration problems, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 1,
            _ => 2,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    crate::agent::AgentError,
    crate::diffkit::DiffError,
    crate::envs::EnvError,
    crate::markov::MarkovError,
    crate::adaptivek::AdaptiveKError,
    serde_json::Error
);

pub type Result<T> = std::result::Result<T, HarnessError>;
