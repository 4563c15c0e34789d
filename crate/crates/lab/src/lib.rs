//! Experiment harness: TOML run configs, run directories, the evaluation
//! protocol, latent and metric exports, and the ablation matrix.

pub mod ablation;
pub mod cli;
pub mod config;
pub mod export;
pub mod pca;
pub mod run;

pub use config::RunConfig;
pub use run::EvalReport;

/// Harness failures, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    /// Malformed config or invocation (exit code 1).
    #[error("config error: {0}")]
    Config(String),
    /// Anything that fails while running (exit code 2).
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Runtime(_) => 2,
        }
    }
}
