//! TOML run configuration. Command-line flags override the file, which
//! overrides the built-in defaults.
//!
//! ```toml
//! seed = 0
//! jobs = 4
//! key_file = "secret.key"
//!
//! [train]     # epochs, lr, momentum, batch_size, seed
//! [white]     # epsilon, xi, alpha, iterations, momentum, di_probability,
//!             # ti_kernel = { size, sigma }, sa_enabled, ensemble_weights
//! [black]     # iterations, xi, epsilon, enhance_step, expand, block,
//!             # max_queries, seed
//! [oracle]    # top_k, retries, backoff_ms, timeout_ms, max_in_flight
//! ```
//!
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackbox::BlackAttackConfig;
use crate::whitebox::WhiteAttackConfig;
use crate::zoo::TrainConfig;

/// Environment variable naming the default key file.
pub const KEY_FILE_ENV: &str = "RAE_KEY_FILE";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("invalid config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub top_k: Option<usize>,
    pub retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { top_k: None, retries: 3, backoff_ms: 50, timeout_ms: 30_000, max_in_flight: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub key_file: Option<PathBuf>,
    pub train: TrainConfig,
    pub white: WhiteAttackConfig,
    pub black: BlackAttackConfig,
    pub oracle: OracleSettings,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.into(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.into(), msg: e.to_string() })?;
        Self::parse(&text, path)
    }

    /// Config from `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, ConfigError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }
}
