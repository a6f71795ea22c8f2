//! Service configuration file.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::clock::ClockMode;
use crate::fleet::ColdStartModel;
use crate::orchestrator::OrchestratorConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
    #[error("unsupported schema_version {0} (expected {SCHEMA_VERSION})")]
    SchemaVersion(u32),
}

/// Top-level service configuration (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub schema_version: u32,
    pub listen: String,
    pub storage_root: PathBuf,
    pub metadata_path: PathBuf,
    pub clock: ClockMode,
    pub seed: u64,
    pub cold_start: ColdStartModel,
    /// Rate of randomly injected spot evictions, per simulated hour.
    pub eviction_rate_per_hour: f64,
    pub mem_capacity_mb: f64,
    #[serde(flatten)]
    pub orchestrator: OrchestratorConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            schema_version: SCHEMA_VERSION,
            listen: "127.0.0.1:4855".into(),
            storage_root: PathBuf::from("./data/storage"),
            metadata_path: PathBuf::from("./data/metadata.jsonl"),
            clock: ClockMode::Wall,
            seed: 0,
            cold_start: ColdStartModel::default(),
            eviction_rate_per_hour: 0.0,
            mem_capacity_mb: 16384.0,
            orchestrator: OrchestratorConfig::default(),
        }
    }
}

impl ServiceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let config: ServiceConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.to_path_buf(),
                source,
            })?;
        if config.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::SchemaVersion(config.schema_version));
        }
        Ok(config)
    }
}
