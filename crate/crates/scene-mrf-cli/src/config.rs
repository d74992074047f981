//! Flat `key = value` config files.
//!
//! One assignment per line; `#` starts a comment line; blank lines are
//! ignored.  Unknown and duplicate keys are hard errors so that a typo can
//! never silently fall back to a default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// A parsed config file.  Values are consumed by the typed accessors; any
/// key left over when [`FlatConfig::finish`] runs is reported as unknown.
#[derive(Debug)]
pub struct FlatConfig {
    path: String,
    values: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn load(path: &Path) -> Result<FlatConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Validation(format!(
                    "{}:{}: expected `key = value`, got {:?}",
                    path.display(),
                    lineno + 1,
                    line
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(CliError::Validation(format!(
                    "{}:{}: empty key",
                    path.display(),
                    lineno + 1
                )));
            }
            if values.insert(key.clone(), value).is_some() {
                return Err(CliError::Validation(format!(
                    "{}:{}: duplicate key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(FlatConfig {
            path: path.display().to_string(),
            values,
        })
    }

    /// Take `key`, parsing it as `T`; fall back to `default` when absent.
    pub fn take_or<T>(&mut self, key: &str, default: T) -> Result<T, CliError>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.values.remove(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|e| {
                CliError::Validation(format!(
                    "{}: key {key:?}: bad value {raw:?}: {e}",
                    self.path
                ))
            }),
        }
    }

    /// All keys must have been consumed; anything left is unknown.
    pub fn finish(self) -> Result<(), CliError> {
        if self.values.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.values.keys().map(String::as_str).collect();
        Err(CliError::Validation(format!(
            "{}: unknown config key(s): {}",
            self.path,
            keys.join(", ")
        )))
    }
}
