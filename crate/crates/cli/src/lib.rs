//! Experiment runner for risk-constrained CRRA portfolios: reads a TOML
//! configuration, solves the unconstrained baseline and every configured
//! risk scenario on a shared path set, and writes CSV series plus a JSON
//! summary.

pub mod config;
pub mod expr;
pub mod output;
pub mod run;

use std::path::Path;

pub use config::ExperimentConfig;
pub use run::{execute, RunOptions, RunOutput};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] crra_core::Error),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "ConfigError",
            Self::Io(_) => "IoError",
            Self::Core(e) => e.kind(),
        }
    }

    /// Single-line JSON error record.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Core(crra_core::Error::InvalidParameter(_) | crra_core::Error::InvalidRiskBound { .. }) => 2,
            _ => 1,
        }
    }
}

/// Solves everything first and only then writes, so a failing run leaves
/// no files behind.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions, out_dir: &Path) -> Result<RunOutput, CliError> {
    let out = execute(cfg, opts)?;
    output::write_all(&out, out_dir)?;
    Ok(out)
}
