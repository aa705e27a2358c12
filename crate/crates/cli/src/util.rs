//! Shared helpers: config-file fallback, seed resolution, manifest parsing.

use std::path::{Path, PathBuf};

use crate::CliError;

/// Optional JSON config file providing defaults for flags the user left
/// unset. Precedence: command-line flag > config file > built-in default.
pub struct ConfigFile {
    value: serde_json::Value,
}

impl ConfigFile {
    pub fn load(path: Option<&PathBuf>) -> Result<Self, CliError> {
        let value = match path {
            None => serde_json::Value::Null,
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("bad config {}: {e}", p.display())))?
            }
        };
        Ok(ConfigFile { value })
    }

    fn get(&self, key: &str) -> Option<&serde_json::Value> {
        self.value.get(key)
    }

    pub fn u64_or(&self, flag: Option<u64>, key: &str, default: u64) -> Result<u64, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_u64()
                .ok_or_else(|| CliError::Config(format!("config key {key} must be an unsigned integer"))),
        }
    }

    pub fn usize_or(&self, flag: Option<usize>, key: &str, default: usize) -> Result<usize, CliError> {
        Ok(self.u64_or(flag.map(|v| v as u64), key, default as u64)? as usize)
    }

    pub fn f64_or(&self, flag: Option<f64>, key: &str, default: f64) -> Result<f64, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| CliError::Config(format!("config key {key} must be a number"))),
        }
    }

    pub fn string_or(&self, flag: Option<String>, key: &str, default: &str) -> Result<String, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.get(key) {
            None => Ok(default.to_string()),
            Some(v) => v
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| CliError::Config(format!("config key {key} must be a string"))),
        }
    }

    /// Seed precedence adds one more layer: the ABFR_SEED environment
    /// variable sits between the config file and the built-in default.
    pub fn seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(v) = flag {
            return Ok(v);
        }
        if let Some(v) = self.get("seed") {
            return v
                .as_u64()
                .ok_or_else(|| CliError::Config("config key seed must be an unsigned integer".into()));
        }
        if let Ok(env) = std::env::var("ABFR_SEED") {
            return env
                .parse()
                .map_err(|_| CliError::Config(format!("ABFR_SEED is not an unsigned integer: {env}")));
        }
        Ok(42)
    }
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Run(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// One row of a dataset manifest (labels.csv): subject id, volume file,
/// class label.
#[derive(Debug, Clone)]
pub struct ManifestRow {
    pub subject: String,
    pub file: String,
    pub label: u8,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read manifest {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "subject,file,label" {
                return Err(CliError::Config(format!(
                    "manifest header must be subject,file,label; got {line}"
                )));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CliError::Config(format!("manifest line {}: {line}", i + 1)));
        }
        let label: u8 = parts[2]
            .parse()
            .map_err(|_| CliError::Config(format!("manifest line {}: bad label {}", i + 1, parts[2])))?;
        if label > 1 {
            return Err(CliError::Config(format!("manifest line {}: label must be 0 or 1", i + 1)));
        }
        rows.push(ManifestRow {
            subject: parts[0].to_string(),
            file: parts[1].to_string(),
            label,
        });
    }
    if rows.is_empty() {
        return Err(CliError::Config("manifest has no subjects".into()));
    }
    Ok(rows)
}

pub fn parse_sizes(text: &str) -> Result<Vec<usize>, CliError> {
    let sizes: Result<Vec<usize>, _> = text.split(',').map(|p| p.trim().parse()).collect();
    let sizes = sizes.map_err(|_| CliError::Config(format!("bad size list: {text}")))?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(CliError::Config(format!("bad size list: {text}")));
    }
    Ok(sizes)
}
