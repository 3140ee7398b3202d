use std::path::PathBuf;

use clap::Args;
use erw_core::env::{builtin_environment, validate_spec, RawSpec, StackChainSpec, TwoSidedMode};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("give exactly one of --spec or --builtin")]
    NoSpec,
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("spec file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid spec: {0}")]
    Spec(#[from] erw_core::SpecError),
    #[error("{0}")]
    Env(#[from] erw_core::EnvError),
    #[error(transparent)]
    Walk(#[from] erw_core::WalkError),
    #[error(transparent)]
    Branching(#[from] erw_core::BranchingError),
    #[error(transparent)]
    Oracle(#[from] erw_core::OracleError),
    #[error(transparent)]
    Analysis(#[from] erw_core::AnalysisError),
    #[error("invalid option: {0}")]
    Invalid(String),
    #[error("cannot write output: {0}")]
    Output(String),
}

/// Options shared by every experiment.
#[derive(Args, Clone, Debug, Serialize)]
pub struct CommonArgs {
    /// Environment spec as a JSON file.
    #[arg(long, conflicts_with = "builtin")]
    pub spec: Option<PathBuf>,
    /// Builtin environment name (see `list-builtins`).
    #[arg(long)]
    pub builtin: Option<String>,
    /// JSON object of builtin parameters.
    #[arg(long, default_value = "null")]
    pub params: String,
    #[arg(long, default_value_t = 1000)]
    pub n: u64,
    #[arg(long, default_value_t = 1000)]
    pub reps: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; replica `i` always uses seed `seed ⊕ i`.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value = "erw-out")]
    pub out: PathBuf,
    /// Refuse negative sites unless the initial law is stationary.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub strict_stationary: bool,
    /// Per-episode step cap.
    #[arg(long, default_value_t = 10_000_000)]
    pub step_cap: u64,
    /// Largest tolerated fraction of truncated episodes.
    #[arg(long, default_value_t = 0.01)]
    pub max_truncated: f64,
    /// Add a wall-clock timestamp to the report.
    #[arg(long)]
    pub timestamp: bool,
}

impl CommonArgs {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.reps == 0 {
            return Err(ConfigError::Invalid("--reps must be at least 1".into()));
        }
        if self.threads == 0 {
            return Err(ConfigError::Invalid("--threads must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_truncated) {
            return Err(ConfigError::Invalid("--max-truncated must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn mode(&self) -> TwoSidedMode {
        if self.strict_stationary {
            TwoSidedMode::Strict
        } else {
            TwoSidedMode::Permissive
        }
    }

    pub fn threads(&self) -> Option<usize> {
        Some(self.threads)
    }

    pub fn batch(&self) -> erw_core::walk::BatchOptions {
        erw_core::walk::BatchOptions {
            threads: self.threads(),
            mode: self.mode(),
            step_cap: self.step_cap,
        }
    }

    /// The spec when one was given, `None` otherwise.
    pub fn maybe_spec(&self) -> Result<Option<StackChainSpec>, ConfigError> {
        if self.spec.is_none() && self.builtin.is_none() {
            return Ok(None);
        }
        self.load_spec().map(Some)
    }

    pub fn load_spec(&self) -> Result<StackChainSpec, ConfigError> {
        match (&self.spec, &self.builtin) {
            (Some(path), None) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.clone(),
                    source,
                })?;
                Ok(validate_spec(&RawSpec::from_json(&text)?)?)
            }
            (None, Some(name)) => {
                let params: serde_json::Value = serde_json::from_str(&self.params)?;
                Ok(builtin_environment(name, &params)?)
            }
            _ => Err(ConfigError::NoSpec),
        }
    }
}

/// SHA-256 of the canonical JSON of the command, its options and the
/// resolved spec.
pub fn config_hash(command: &str, options: &serde_json::Value, spec: Option<&StackChainSpec>) -> String {
    let canonical = serde_json::json!({
        "command": command,
        "options": options,
        "spec": spec.map(|s| serde_json::to_value(s.to_raw()).unwrap_or_default()),
    });
    let digest = Sha256::digest(canonical.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
