//! Flat `key = value` configuration files (TOML syntax, no tables).
//! Unknown keys are rejected.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn render_config(config: &TrainConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(e.to_string()))
}

/// SHA-256 over the canonical JSON rendering of the config.
pub fn config_hash(config: &TrainConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

pub fn file_fingerprint(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
