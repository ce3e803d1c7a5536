//! `key = value` configuration files with `#` comments.

use std::path::Path;
use std::str::FromStr;

use crate::error::{LicaError, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    /// (key, value, 1-based line; 0 for overrides)
    entries: Vec<(String, String, usize)>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| LicaError::Config(format!("line {}: expected key = value, got '{line}'", n + 1)))?;
            let key = k.trim();
            if key.is_empty() {
                return Err(LicaError::Config(format!("line {}: empty key", n + 1)));
            }
            if cfg.get(key).is_some() {
                return Err(LicaError::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            cfg.entries.push((key.to_string(), v.trim().to_string(), n + 1));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Replaces or adds a value.
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.entries.iter_mut().find(|(k, _, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value, 0)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(k, _, _)| k.as_str())
    }

    fn where_(&self, key: &str) -> String {
        match self.entries.iter().find(|(k, _, _)| k == key) {
            Some((_, _, 0)) | None => format!("'{key}'"),
            Some((_, _, line)) => format!("'{key}' (line {line})"),
        }
    }

    pub fn value<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|e| LicaError::Config(format!("bad value for {}: {e}", self.where_(key)))),
        }
    }

    pub fn value_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.value(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(s) if s.trim().is_empty() => Ok(Some(Vec::new())),
            Some(s) => s
                .split(',')
                .map(|x| x.trim().parse::<T>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|e| LicaError::Config(format!("bad list for {}: {e}", self.where_(key)))),
        }
    }

    /// Errors on the first key not matched by `allowed`. A trailing `*` in
    /// an allowed entry matches any suffix.
    pub fn check_known(&self, allowed: &[&str]) -> Result<()> {
        for (k, _, line) in &self.entries {
            let ok = allowed.iter().any(|a| match a.strip_suffix('*') {
                Some(prefix) => k.starts_with(prefix),
                None => a == k,
            });
            if !ok {
                let at = if *line > 0 { format!(" (line {line})") } else { String::new() };
                return Err(LicaError::Config(format!("unknown key '{k}'{at}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let c = Config::parse("# header\nmode = subspace\nm=3  # trailing\n\nepsilon = 1e-5\nalpha = 0, 2, 3\n").unwrap();
        assert_eq!(c.get("mode"), Some("subspace"));
        assert_eq!(c.value::<usize>("m").unwrap(), Some(3));
        assert_eq!(c.value::<f64>("epsilon").unwrap(), Some(1e-5));
        assert_eq!(c.list::<f64>("alpha").unwrap(), Some(vec![0.0, 2.0, 3.0]));
        assert_eq!(c.value::<f64>("missing").unwrap(), None);
    }

    #[test]
    fn unknown_key_is_named() {
        let c = Config::parse("mode = exact\nbogus = 1\n").unwrap();
        let err = c.check_known(&["mode", "region.*"]).unwrap_err().to_string();
        assert!(err.contains("bogus") && err.contains("line 2"), "{err}");
        assert!(Config::parse("region.0 = 1").unwrap().check_known(&["region.*"]).is_ok());
    }

    #[test]
    fn malformed_lines() {
        assert!(Config::parse("a = 1\njust words\n").unwrap_err().to_string().contains("line 2"));
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        let c = Config::parse("m = two").unwrap();
        assert!(c.value::<usize>("m").unwrap_err().to_string().contains("line 1"));
    }

    #[test]
    fn overrides_replace() {
        let mut c = Config::parse("m = 2").unwrap();
        c.set("m", "3");
        c.set("seed", "7");
        assert_eq!(c.value::<usize>("m").unwrap(), Some(3));
        assert_eq!(c.value::<u64>("seed").unwrap(), Some(7));
    }
}
