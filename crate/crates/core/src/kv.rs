//! Line-oriented `key=value` text records used for configs, manifests and
//! checkpoint metadata. Blank lines and lines starting with `#` are skipped.

use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KvError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("duplicate key {0:?}")]
    Duplicate(String),
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("missing key {0:?}")]
    Missing(String),
    #[error("invalid value for {key:?}: {value:?}")]
    InvalidValue { key: String, value: String },
}

pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, KvError> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(KvError::Malformed { line: i + 1, text: raw.to_string() });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(KvError::Malformed { line: i + 1, text: raw.to_string() });
        }
        if out.iter().any(|(existing, _)| existing == key) {
            return Err(KvError::Duplicate(key.to_string()));
        }
        out.push((key.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, KvError> {
    value.parse().map_err(|_| KvError::InvalidValue { key: key.to_string(), value: value.to_string() })
}

/// Parses a comma-separated list such as `2,5,10`.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, KvError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Ordered builder for `key=value` output.
#[derive(Debug, Default, Clone)]
pub struct KvWriter {
    lines: Vec<String>,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.lines.push(format!("{key}={value}"));
        self
    }

    pub fn finish(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}
