//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys not listed in
//! [`CliConfig::set`] are rejected so that typos surface early.

use std::fs;
use std::path::{Path, PathBuf};

use rcbrt::compiler::LowerOptions;
use rcbrt::hal::{CacheModel, GridConfig};
use rcbrt::net::DEFAULT_PORT;
use rcbrt::SimConfig;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("{key}: invalid value {value:?}")]
    Value { key: String, value: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliConfig {
    pub sim: SimConfig,
    pub port: u16,
    pub model_dir: Option<PathBuf>,
    pub weights_dir: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            port: DEFAULT_PORT,
            model_dir: None,
            weights_dir: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    let v = value.replace('_', "");
    let parsed = match v.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok().and_then(|n| n.to_string().parse().ok()),
        None => v.parse().ok(),
    };
    parsed.ok_or_else(|| ConfigError::Value {
        key: key.into(),
        value: value.into(),
    })
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_file(path)?;
        Ok(c)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        self.apply_str(&text)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a single `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let s = &mut self.sim;
        match key {
            "cols" => s.grid.cols = num(key, value)?,
            "rows" => s.grid.rows = num(key, value)?,
            "local_mem_size" => s.local_mem_size = num(key, value)?,
            "global_mem_size" => s.global_mem_size = num(key, value)?,
            "dma_setup_ticks" => s.dma_setup_ticks = num(key, value)?,
            "dma_bytes_per_tick" => s.dma_bytes_per_tick = num(key, value)?,
            "reg_access_ticks" => s.reg_access_ticks = num(key, value)?,
            "poll_interval_ticks" => s.poll_interval_ticks = num(key, value)?,
            "ticks_per_us" => s.ticks_per_us = num(key, value)?,
            "kernel_launch_ticks" => s.kernel_launch_ticks = num(key, value)?,
            "kernel_lanes" => s.kernel_lanes = num(key, value)?,
            "cache_model" => {
                s.cache_model = match value {
                    "off" => CacheModel::Off,
                    "stale" | "stale_until_flush" => CacheModel::StaleUntilFlush,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                        })
                    }
                }
            }
            "port" => self.port = num(key, value)?,
            "model_dir" => self.model_dir = Some(value.into()),
            "weights_dir" => self.weights_dir = Some(value.into()),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        if s.grid.cols == 0 || s.grid.rows == 0 || s.dma_bytes_per_tick == 0 || s.kernel_lanes == 0 || s.ticks_per_us == 0 {
            return Err(ConfigError::Value {
                key: key.into(),
                value: value.into(),
            });
        }
        Ok(())
    }

    pub fn grid(&self) -> GridConfig {
        self.sim.grid
    }

    pub fn lower_options(&self, cache_ops: bool, wait_event: bool) -> LowerOptions {
        LowerOptions {
            cache_ops,
            wait_event,
            grid: self.sim.grid,
            local_mem_size: self.sim.local_mem_size,
        }
    }
}
