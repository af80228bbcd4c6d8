//! Plain-text `key = value` configuration.
//!
//! One entry per line, `#` starts a comment, keys are dotted paths such as
//! `model.backbone_channels`. Consumers take the keys they understand and
//! then call [`KeyValues::finish`], which rejects anything left over.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    source: String,
}

impl KeyValues {
    pub fn new(source: impl Into<String>) -> Self {
        KeyValues {
            entries: BTreeMap::new(),
            source: source.into(),
        }
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut kv = KeyValues::new(source);
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{source}:{}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "{source}:{}: invalid key {key:?}",
                    lineno + 1
                )));
            }
            if kv.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "{source}:{}: duplicate key {key}",
                    lineno + 1
                )));
            }
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) {
        self.entries.insert(key.into(), value.to_string());
    }

    pub fn set_list<V: Display>(&mut self, key: impl Into<String>, values: &[V]) {
        let joined = values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        self.entries.insert(key.into(), joined);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    pub fn take_parsed<V: FromStr>(&mut self, key: &str) -> Result<Option<V>>
    where
        V::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                Error::Config(format!("{}: {key} = {raw:?}: {e}", self.source))
            }),
        }
    }

    /// Comma-separated list.
    pub fn take_list<V: FromStr>(&mut self, key: &str) -> Result<Option<Vec<V>>>
    where
        V::Err: Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(raw) => raw
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|e| {
                        Error::Config(format!("{}: {key} = {raw:?}: {e}", self.source))
                    })
                })
                .collect::<Result<Vec<V>>>()
                .map(Some),
        }
    }

    /// Overwrites `*slot` when `key` is present.
    pub fn apply<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some(v) = self.take_parsed(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn apply_list<V: FromStr>(&mut self, key: &str, slot: &mut Vec<V>) -> Result<()>
    where
        V::Err: Display,
    {
        if let Some(v) = self.take_list(key)? {
            *slot = v;
        }
        Ok(())
    }

    /// Moves every `prefix.*` entry into a new map.
    pub fn split_prefix(&mut self, prefix: &str) -> KeyValues {
        let dotted = format!("{prefix}.");
        let keys: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(&dotted))
            .cloned()
            .collect();
        let mut out = KeyValues::new(self.source.clone());
        for k in keys {
            let v = self.entries.remove(&k).unwrap();
            out.entries.insert(k, v);
        }
        out
    }

    pub fn merge(&mut self, other: KeyValues) {
        self.entries.extend(other.entries);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            return Ok(());
        }
        let keys: Vec<_> = self.entries.keys().cloned().collect();
        Err(Error::Config(format!(
            "{}: unrecognized key(s): {}",
            self.source,
            keys.join(", ")
        )))
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
