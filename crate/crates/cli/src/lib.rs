//! Experiment runner behind the `sdprune` binary.

pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use commands::{run, Command};
pub use config::{config_hash, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] sdprune_core::Error),
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    CheckFailed = 1,
    Input = 2,
    Divergence = 3,
    Precondition = 4,
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        use sdprune_core::Error as E;
        match self {
            CliError::Config(_) => ExitCode::Input,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::Numeric(_) => ExitCode::Divergence,
                E::Domain(_) | E::SignCrossing { .. } => ExitCode::Precondition,
                _ => ExitCode::Input,
            },
        }
    }
}

/// Summary written as `report.json` by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub final_train_loss: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub sparsity: Option<f64>,
    pub flops_reduction: Option<f64>,
    pub wall_time_s: f64,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub warnings: Vec<String>,
    /// Outcome of the subcommand's own check, where it has one.
    pub passed: Option<bool>,
    pub details: Value,
}

impl RunReport {
    pub fn exit_code(&self) -> ExitCode {
        if self.passed == Some(false) {
            ExitCode::CheckFailed
        } else {
            ExitCode::Ok
        }
    }
}
