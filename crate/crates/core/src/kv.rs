//! `key = value` text files: headers, synthetic specs, configs and reports.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique;
//! values are everything after the first `=`, trimmed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
    order: Vec<String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut map = KvMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(KvError::Syntax { line: i + 1 })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(KvError::Syntax { line: i + 1 });
            }
            if map.entries.contains_key(key) {
                return Err(KvError::Duplicate {
                    line: i + 1,
                    key: key.to_string(),
                });
            }
            map.insert(key, v.trim());
        }
        Ok(map)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        if self
            .entries
            .insert(key.to_string(), value.to_string())
            .is_none()
        {
            self.order.push(key.to_string());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn require(&self, key: &str) -> Result<&str, KvError> {
        self.get(key).ok_or_else(|| KvError::Missing(key.to_string()))
    }

    pub fn parse_value<T: FromStr>(&self, key: &str) -> Result<T, KvError> {
        let v = self.require(key)?;
        v.parse().map_err(|_| KvError::Value {
            key: key.to_string(),
            value: v.to_string(),
        })
    }

    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, KvError> {
        if self.contains(key) {
            self.parse_value(key)
        } else {
            Ok(default)
        }
    }

    /// Whitespace-separated list.
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, KvError> {
        let v = self.require(key)?;
        v.split_whitespace()
            .map(|s| {
                s.parse().map_err(|_| KvError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    /// Serializes in insertion order.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in &self.order {
            let _ = writeln!(out, "{} = {}", k, self.entries[k]);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let text = "# header\nformat = vol4\n\ndims = 2 3 4 5\nrt=0.72\n";
        let kv = KvMap::parse(text).unwrap();
        assert_eq!(kv.get("format"), Some("vol4"));
        assert_eq!(kv.parse_list::<usize>("dims").unwrap(), vec![2, 3, 4, 5]);
        assert_eq!(kv.parse_value::<f64>("rt").unwrap(), 0.72);
        assert_eq!(KvMap::parse(&kv.render()).unwrap(), kv);
    }

    #[test]
    fn errors() {
        assert_eq!(KvMap::parse("nope"), Err(KvError::Syntax { line: 1 }));
        assert!(matches!(
            KvMap::parse("a = 1\na = 2"),
            Err(KvError::Duplicate { line: 2, .. })
        ));
        let kv = KvMap::parse("a = x").unwrap();
        assert!(matches!(kv.parse_value::<f64>("a"), Err(KvError::Value { .. })));
        assert!(matches!(kv.parse_value::<f64>("b"), Err(KvError::Missing(_))));
    }
}
