//! Flat `key=value` text configuration.
//!
//! One entry per line; `#` starts a comment; blank lines are ignored. Later
//! entries override earlier ones, which is how command-line overrides are
//! layered on top of a file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected key=value, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut map = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| KvError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            map.set(k.trim(), v.trim());
        }
        Ok(map)
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    /// Typed lookup; `None` when absent.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| KvError::Value {
                key: key.to_string(),
                value: v.clone(),
            }),
        }
    }

    /// Overwrites `slot` when the key is present.
    pub fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), KvError> {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Comma-separated list lookup.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, KvError> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) if v.is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| KvError::Value {
                        key: key.to_string(),
                        value: v.clone(),
                    })
                })
                .collect::<Result<Vec<T>, _>>()
                .map(Some),
        }
    }

    /// Fails on the first key not in `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<(), KvError> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(KvError::UnknownKey(k.clone())),
            None => Ok(()),
        }
    }

    /// Entries whose key starts with `prefix`, with the prefix removed.
    pub fn section(&self, prefix: &str) -> KvMap {
        KvMap {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    /// Layers `other` over `self`.
    pub fn merge(&mut self, other: &KvMap) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

pub fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let mut m = KvMap::parse("# comment\na = 1\nb=x,y\n\na=2 # trailing\n").unwrap();
        assert_eq!(m.get::<u32>("a").unwrap(), Some(2));
        assert_eq!(m.get_list::<String>("b").unwrap().unwrap(), vec!["x", "y"]);
        m.merge(&KvMap::parse("b=z").unwrap());
        assert_eq!(m.get_str("b"), Some("z"));
    }

    #[test]
    fn errors_are_specific() {
        assert!(matches!(KvMap::parse("novalue"), Err(KvError::Syntax { line: 1, .. })));
        let m = KvMap::parse("a=abc").unwrap();
        assert!(matches!(m.get::<u32>("a"), Err(KvError::Value { .. })));
        assert!(matches!(m.check_keys(&["b"]), Err(KvError::UnknownKey(_))));
    }
}
