//! Flat `key = value` config files with one `[section]` per command.
//! Command-line flags override file values; every run writes its resolved
//! config next to its outputs so the run can be reproduced bit-exactly.

use anyhow::{bail, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    /// section -> key -> value
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                current = name.trim().to_string();
                sections.entry(current.clone()).or_default();
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bail!("config line {}: expected `key = value`, got `{line}`", ln + 1);
            };
            sections
                .entry(current.clone())
                .or_default()
                .insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Self { sections })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
    }
}

/// Resolved settings of one run, written as `config.resolved`.
#[derive(Debug, Clone, Default)]
pub struct Resolved {
    pub section: String,
    entries: Vec<(String, String)>,
}

impl Resolved {
    pub fn new(section: &str) -> Self {
        Self {
            section: section.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn text(&self) -> String {
        let mut out = format!("[{}]\n", self.section);
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("config.resolved"), self.text())?;
        Ok(())
    }
}

/// Flag-over-file resolution: explicit flag wins, then config file, then
/// default.
pub fn resolve<T: std::str::FromStr>(
    flag: Option<T>,
    file: Option<&str>,
    default: T,
) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(s) = file {
        return s
            .parse::<T>()
            .map_err(|e| anyhow::anyhow!("config value `{s}`: {e}"));
    }
    Ok(default)
}
