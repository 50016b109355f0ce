//! Flat `key = value` text configs.
//!
//! One pair per line; `#` starts a comment; blank lines are ignored. Keys are
//! unique. Typed lookups report the offending key and line.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { key: String, line: usize },
    #[error("line {line}: bad value for `{key}`: {reason}")]
    Value { key: String, line: usize, reason: String },
    #[error("unknown key `{key}` on line {line}")]
    Unknown { key: String, line: usize },
    #[error("cannot read config: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FlatConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl FlatConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let Some((k, v)) = body.split_once('=') else {
                return Err(ConfigError::Syntax { line });
            };
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            if entries.insert(k.to_string(), (v.to_string(), line)).is_some() {
                return Err(ConfigError::Duplicate { key: k.into(), line });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get_raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e: T::Err| ConfigError::Value {
                key: key.into(),
                line: *line,
                reason: e.to_string(),
            }),
        }
    }

    /// Overwrite `slot` when `key` is present.
    pub fn set<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some((v, line)) = self.entries.get(key) else { return Ok(None) };
        v.split(',')
            .map(|p| {
                p.trim().parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.into(),
                    line: *line,
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Reject keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(ConfigError::Unknown { key: k.clone(), line: *line });
            }
        }
        Ok(())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }
}
