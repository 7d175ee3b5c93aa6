//! Flat `key = value` config files. Flags override file values; unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use camaudit_core::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path, known_keys: &[&str]) -> Result<ConfigFile> {
        let text = std::fs::read_to_string(path)?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key = value", path.display(), lineno + 1))
            })?;
            let key = key.trim().to_string();
            if !known_keys.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "{}:{}: unknown key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            values.insert(key, value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key:?}: bad value {raw:?}"))),
        }
    }
}

/// Flag wins over config file, which wins over the default.
pub fn resolve<T: std::str::FromStr + Clone>(
    flag: &Option<T>,
    file: &ConfigFile,
    key: &str,
    default: T,
) -> Result<T> {
    if let Some(v) = flag {
        return Ok(v.clone());
    }
    Ok(file.get::<T>(key)?.unwrap_or(default))
}
