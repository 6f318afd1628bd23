//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Values are resolved
//! with precedence command-line flag > file > built-in default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: cannot parse `{value}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("cannot read config: {0}")]
    Io(String),
}

pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "threads",
    "log_level",
    "mlm_rate",
    "itm_ratio",
    "ikm_ratio",
    "iec_ratio",
    "max_text_tokens",
    "max_objects",
    "tau",
    "ikm_candidate_count",
    "iec_sample_images",
    "top_k_objects",
    "distance",
    "knowledge_budget",
    "batch_size",
    "max_steps",
    "lr",
    "dropout",
    "checkpoint_interval",
    "hidden",
    "layers",
    "heads",
    "ffn",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if !KNOWN_KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::BadValue {
                    key: key.to_string(),
                    value: v.to_string(),
                    reason: e.to_string(),
                })
            })
            .transpose()
    }

    /// Flag if given, else file value, else `default`.
    pub fn layered<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(v),
            None => Ok(self.get(key)?.unwrap_or(default)),
        }
    }
}

/// Comma-separated label ratio such as `2,1,1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio<const N: usize>(pub [u32; N]);

impl<const N: usize> FromStr for Ratio<N> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("`{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        let arr: [u32; N] = parts
            .try_into()
            .map_err(|v: Vec<u32>| format!("expected {N} values, got {}", v.len()))?;
        Ok(Ratio(arr))
    }
}
