//! Line-oriented `key = value` configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, (usize, String)>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(line_no, format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || v.is_empty() {
                return Err(Error::parse(line_no, "empty key or value"));
            }
            if entries.insert(k.to_string(), (line_no, v.to_string())).is_some() {
                return Err(Error::parse(line_no, format!("duplicate key `{k}`")));
            }
        }
        Ok(Config { entries })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Parsed value of `key`, or `default` when absent.
    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| Error::parse(*line, format!("cannot parse `{v}` for key `{key}`"))),
        }
    }

    /// Comma-separated list, or `default` when absent.
    pub fn get_list_or<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.entries.get(key) {
            None => Ok(default),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::parse(*line, format!("bad list item `{s}` for key `{key}`")))
                })
                .collect(),
        }
    }

    /// Rejects any key outside `known`.
    pub fn ensure_known(&self, known: &[&str]) -> Result<()> {
        for (k, (line, _)) in &self.entries {
            if !known.contains(&k.as_str()) {
                return Err(Error::parse(*line, format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, (_, v)) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
