//! `key = value` run files. Keys are long flag names without the dashes.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use qam_core::{Error, Result};

#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, allowed: &[&str]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = k.trim().replace('_', "-");
            if !allowed.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{}' (allowed: {})",
                    n + 1,
                    k.trim(),
                    allowed.join(", ")
                )));
            }
            if values.insert(key, v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("line {}: key '{}' repeated", n + 1, k.trim())));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: Option<&Path>, allowed: &[&str]) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Input(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text, allowed)
            }
        }
    }

    /// The flag value if given, else the file value, else `default`.
    pub fn pick<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("config key '{key}': cannot parse '{s}'"))),
        }
    }

    pub fn flag(&self, key: &str, flag: bool) -> Result<bool> {
        if flag {
            return Ok(true);
        }
        self.pick(key, None, false)
    }
}
