//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are grouped by
//! prefix: `bench.*` and `demo.*` belong to those subcommands, the agent and
//! collector keys are passed through to their own parsers.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: String, line: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Settings {
    pairs: Vec<(String, String)>,
}

pub const AGENT_KEYS: [&str; 5] = [
    "queue.capacity",
    "queue.overflow",
    "sink",
    "collection.level",
    "host.name",
];

pub const COLLECTOR_KEYS: [&str; 9] = [
    "listen",
    "export",
    "export.target",
    "idle.timeout.ms",
    "settle.ms",
    "buffer.capacity",
    "batch.size",
    "max.open",
    "stats.listen",
];

impl Settings {
    pub fn parse(text: &str, path: &str) -> Result<Self, SettingsError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(SettingsError::Syntax {
                path: path.to_string(),
                line: i + 1,
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(SettingsError::Syntax {
                    path: path.to_string(),
                    line: i + 1,
                });
            }
            pairs.push((k.to_string(), v.trim().to_string()));
        }
        Ok(Self { pairs })
    }

    pub fn load(path: &Path) -> Result<Self, SettingsError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| SettingsError::Read {
            path: shown.clone(),
            source,
        })?;
        Self::parse(&text, &shown)
    }

    /// Pairs whose key is one of `keys`, in file order.
    pub fn select<'a>(&'a self, keys: &'a [&str]) -> impl Iterator<Item = (&'a str, &'a str)> + 'a {
        self.pairs
            .iter()
            .filter(move |(k, _)| keys.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Last value of `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.pairs
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Keys no subcommand understands.
    pub fn unknown_keys(&self, extra: &[&str]) -> Vec<&str> {
        self.pairs
            .iter()
            .map(|(k, _)| k.as_str())
            .filter(|k| {
                !AGENT_KEYS.contains(k)
                    && !COLLECTOR_KEYS.contains(k)
                    && !extra.contains(k)
            })
            .collect()
    }
}
