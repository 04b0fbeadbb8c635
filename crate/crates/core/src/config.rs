//! Flat `key = value` configuration files.
//!
//! Blank lines and text after `#` are ignored. Keys are exactly the field
//! names of [`ModelConfig`] and [`TrainConfig`]; unknown keys are rejected.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::separator::ModelConfig;
use crate::trainer::TrainConfig;

/// Splits `text` into `(key, value)` pairs, in order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::config(format!(
                "line {}: expected key = value, got {line:?}",
                n + 1
            )));
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || value.is_empty() {
            return Err(Error::config(format!("line {}: empty key or value", n + 1)));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

/// Model and training settings read from one file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Starts from the full-size defaults and applies every pair in `text`.
    pub fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse_with(text, TrainConfig::default())
    }

    /// Like [`RunConfig::parse`], with `train` as the training defaults.
    pub fn parse_with(text: &str, train: TrainConfig) -> Result<RunConfig> {
        let mut config = RunConfig {
            model: ModelConfig::full_size(),
            train,
        };
        for (key, value) in parse_pairs(text)? {
            if !config.model.set(&key, &value)? && !config.train.set(&key, &value)? {
                return Err(Error::config(format!("unknown configuration key {key:?}")));
            }
        }
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::load_with(path, TrainConfig::default())
    }

    pub fn load_with(path: &Path, train: TrainConfig) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_with(&text, train)
    }
}
