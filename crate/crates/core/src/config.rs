//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type KeyValues = BTreeMap<String, String>;

pub fn parse_kv(text: &str) -> Result<KeyValues, ConfigError> {
    let mut out = KeyValues::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        };
        let key = k.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            });
        }
        if out.insert(key.to_string(), v.trim().to_string()).is_some() {
            return Err(ConfigError::Duplicate {
                line: i + 1,
                key: key.to_string(),
            });
        }
    }
    Ok(out)
}

pub fn read_kv_file(path: &Path) -> Result<KeyValues, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_kv(&text)
}

pub fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

/// Ordered manifest of resolved settings, rendered as `key=value` lines.
#[derive(Debug, Default, Clone)]
pub struct Manifest {
    entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) -> &mut Self {
        self.entries.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = parse_kv("# c\n\na = 1\n b=two words \n").unwrap();
        assert_eq!(kv["a"], "1");
        assert_eq!(kv["b"], "two words");
    }

    #[test]
    fn rejects_bad_lines() {
        assert!(matches!(
            parse_kv("novalue"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_kv("a=1\na=2"),
            Err(ConfigError::Duplicate { line: 2, .. })
        ));
    }

    #[test]
    fn manifest_round_trips_through_parser() {
        let mut m = Manifest::new();
        m.push("lr0", 1e-4).push("preset", "adam-3t");
        let kv = parse_kv(&m.render()).unwrap();
        assert_eq!(kv["lr0"].parse::<f64>().unwrap(), 1e-4);
        assert_eq!(m.get("preset"), Some("adam-3t"));
    }
}
