use std::collections::BTreeMap;
use std::fmt::Display;
use std::str::FromStr;

use crate::error::{config_err, Result};

/// `key = value` lines with `#` comments. Every key must be consumed by
/// the caller; [`KeyValues::finish`] rejects leftovers.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `key = value`, got `{line}`", i + 1))?;
            let k = k.trim().to_string();
            if entries.insert(k.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(config_err!("line {}: key `{k}` given twice", i + 1));
            }
        }
        Ok(KeyValues { entries })
    }

    pub fn take_str(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    /// Parse and remove `key`, leaving `target` untouched when absent.
    pub fn take<T>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some((v, line)) = self.entries.remove(key) {
            *target = v.parse().map_err(|e| config_err!("line {line}: `{key}`: {e}"))?;
        }
        Ok(())
    }

    /// Comma-separated list.
    pub fn take_list<T>(&mut self, key: &str, target: &mut Vec<T>) -> Result<()>
    where
        T: FromStr,
        T::Err: Display,
    {
        if let Some((v, line)) = self.entries.remove(key) {
            *target = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| config_err!("line {line}: `{key}`: {e}")))
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (_, line))) => Err(config_err!("line {line}: unknown key `{k}`")),
        }
    }
}
