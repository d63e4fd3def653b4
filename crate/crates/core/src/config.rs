//! Flat `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Keys are ASCII letters, digits, `_`, `-` and `.`. A file whose first
//! non-blank character is `{` is read as a JSON object instead; nested
//! objects flatten to dotted keys and arrays of scalars to comma lists.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

impl KvConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            return Self::parse_json(text);
        }
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !valid_key(k) {
                return Err(Error::Config(format!("line {}: invalid key {k:?}", i + 1)));
            }
            if cfg.entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
            }
        }
        Ok(cfg)
    }

    pub fn parse_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("json config: {e}")))?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("json config must be an object".into()))?;
        let mut cfg = Self::new();
        flatten("", obj, &mut cfg.entries, 0)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("cannot parse value {v:?} for key {key:?}"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list value.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.get(key) {
            None => Ok(None),
            Some(v) if v.trim().is_empty() => Ok(Some(Vec::new())),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad list item {s:?} for key {key:?}")))
                })
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    /// Rejects keys outside `allowed`.
    pub fn ensure_known(&self, allowed: &[&str]) -> Result<()> {
        match self.keys().find(|k| !allowed.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown key {k:?}"))),
            None => Ok(()),
        }
    }

    /// Entries whose keys start with `prefix.`, with the prefix stripped.
    pub fn section(&self, prefix: &str) -> Self {
        let p = format!("{prefix}.");
        Self {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &KvConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

fn scalar(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn flatten(
    prefix: &str,
    obj: &serde_json::Map<String, serde_json::Value>,
    out: &mut BTreeMap<String, String>,
    depth: usize,
) -> Result<()> {
    if depth > 8 {
        return Err(Error::Config("json config nested too deeply".into()));
    }
    for (k, v) in obj {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        if !valid_key(&key) {
            return Err(Error::Config(format!("invalid key {key:?}")));
        }
        match v {
            serde_json::Value::Object(inner) => flatten(&key, inner, out, depth + 1)?,
            serde_json::Value::Array(items) => {
                let parts = items
                    .iter()
                    .map(scalar)
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| Error::Config(format!("key {key:?}: arrays must hold scalars")))?;
                out.insert(key, parts.join(","));
            }
            serde_json::Value::Null => {
                return Err(Error::Config(format!("key {key:?} is null")));
            }
            other => {
                out.insert(key, scalar(other).unwrap());
            }
        }
    }
    Ok(())
}

impl fmt::Display for KvConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_key_values() {
        let cfg = KvConfig::parse("# mcem\nem_iters = 30\n\nepsilon=0.01 # walk\nname = a b\n").unwrap();
        assert_eq!(cfg.get::<usize>("em_iters").unwrap(), Some(30));
        assert_eq!(cfg.get::<f64>("epsilon").unwrap(), Some(0.01));
        assert_eq!(cfg.raw("name"), Some("a b"));
        assert_eq!(cfg.get::<u32>("missing").unwrap(), None);
        assert!(cfg.get::<usize>("name").is_err());
        assert!(cfg.ensure_known(&["em_iters", "epsilon"]).is_err());
        assert_eq!(KvConfig::parse(&cfg.to_string()).unwrap(), cfg);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(KvConfig::parse("just words").is_err());
        assert!(KvConfig::parse("a = 1\na = 2").is_err());
        assert!(KvConfig::parse("bad key = 1").is_err());
        assert!(KvConfig::parse("= 1").is_err());
    }

    #[test]
    fn json_flattens() {
        let cfg = KvConfig::parse(r#"{"seed": 7, "mcem": {"em_iters": 5}, "snr": [-5, 0], "ok": true}"#).unwrap();
        assert_eq!(cfg.get::<u64>("seed").unwrap(), Some(7));
        assert_eq!(cfg.section("mcem").get::<usize>("em_iters").unwrap(), Some(5));
        assert_eq!(cfg.get_list::<f64>("snr").unwrap(), Some(vec![-5.0, 0.0]));
        assert!(KvConfig::parse("[1, 2]").is_err());
        assert!(KvConfig::parse(r#"{"a": null}"#).is_err());
        assert!(KvConfig::parse(r#"{"a": [{"b": 1}]}"#).is_err());
    }
}
