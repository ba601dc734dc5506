//! Flat `key = value` configuration files. Blank lines and `#` comments are
//! ignored; later keys override earlier ones.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", n + 1)));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Typed value, or `default` when the key is absent.
    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`"))),
        }
    }

    /// Comma-separated list; an absent key yields `default`, an empty list is an error.
    pub fn list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        let Some(v) = self.raw(key) else {
            return Ok(default);
        };
        let items = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse `{s}`")))
            })
            .collect::<Result<Vec<T>>>()?;
        if items.is_empty() {
            return Err(Error::Config(format!("{key}: empty list")));
        }
        Ok(items)
    }

    /// Rejects keys outside `allowed`.
    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_types() {
        let kv =
            KeyValues::parse("# header\nW = 50\nebs = 1e-3, 1e-4\n\nname=x # trailing\nW=60\n")
                .unwrap();
        assert_eq!(kv.get("W", 0u64).unwrap(), 60);
        assert_eq!(kv.list::<f64>("ebs", vec![]).unwrap(), vec![1e-3, 1e-4]);
        assert_eq!(kv.raw("name"), Some("x"));
        assert_eq!(kv.get("missing", 7).unwrap(), 7);
        assert!(kv.get::<u64>("name", 0).is_err());
        assert!(kv.check_keys(&["W", "ebs"]).is_err());
        assert!(kv.check_keys(&["W", "ebs", "name"]).is_ok());
    }

    #[test]
    fn rejects_malformed() {
        assert!(matches!(KeyValues::parse("novalue"), Err(Error::Config(_))));
        assert!(KeyValues::parse("=3").is_err());
        let kv = KeyValues::parse("xs = ,").unwrap();
        assert!(kv.list::<u32>("xs", vec![1]).is_err());
    }
}
