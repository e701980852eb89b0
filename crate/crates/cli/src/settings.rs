//! Flat `key=value` settings: command defaults, overridden by a config file,
//! overridden by flags given on the command line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn with_defaults(defaults: &[(&str, &str)]) -> Self {
        Self {
            values: defaults.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Parses `key=value` lines. Blank lines and `#` comments are skipped;
    /// unknown keys are rejected with their line number.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Input(format!("{origin}:{}: expected key=value, got {line:?}", n + 1)))?;
            let key = k.trim().replace('-', "_");
            if !self.values.contains_key(&key) {
                return Err(CliError::Input(format!("{origin}:{}: unknown key {key:?}", n + 1)));
            }
            self.values.insert(key, v.trim().to_string());
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: String) {
        self.values.insert(key.to_string(), value);
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Input(format!("setting {key}={raw:?}: {e}")))
    }

    /// Empty values mean "not given".
    pub fn optional(&self, key: &str) -> Option<&str> {
        Some(self.raw(key)).filter(|v| !v.is_empty())
    }

    pub fn required(&self, key: &str) -> Result<&str, CliError> {
        self.optional(key)
            .ok_or_else(|| CliError::Input(format!("missing required setting {key}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|e| CliError::Input(format!("setting {key}: item {s:?}: {e}")))
            })
            .collect()
    }

    pub fn map(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// The settings as `# key=value` comment lines for CSV headers.
    pub fn csv_header(&self) -> String {
        self.render().lines().map(|l| format!("# {l}\n")).collect()
    }
}
