//! Layered configuration: defaults, then a TOML file, then `--set` overrides,
//! then path overrides from flags or the environment.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use toml::{Table, Value};
use unlearn_core::config::RunConfig;

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path} is not valid TOML: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("bad override `{0}`: expected KEY=VALUE")]
    Override(String),
    #[error("override `{key}` conflicts with a non-table value at `{at}`")]
    NotATable { key: String, at: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Default)]
pub struct PathOverrides {
    pub artifact_dir: Option<PathBuf>,
    pub run_dir: Option<PathBuf>,
}

pub fn load(file: Option<&Path>, sets: &[String], paths: &PathOverrides) -> Result<RunConfig, SettingsError> {
    let mut table = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| SettingsError::Read {
                path: path.to_path_buf(),
                source,
            })?;
            text.parse::<Table>().map_err(|e| SettingsError::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => Table::new(),
    };
    for raw in sets {
        apply_override(&mut table, raw)?;
    }
    let mut config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| SettingsError::Invalid(e.to_string()))?;
    if let Some(dir) = &paths.artifact_dir {
        config.paths.artifact_dir = dir.clone();
    }
    if let Some(dir) = &paths.run_dir {
        config.paths.run_dir = dir.clone();
    }
    config.resolved().map_err(|e| SettingsError::Invalid(e.to_string()))
}

/// Sets a dotted key. The value is read as a TOML literal when possible,
/// otherwise as a bare string, so `--set scenario.similar_target=add` works.
fn apply_override(table: &mut Table, raw: &str) -> Result<(), SettingsError> {
    let (key, value) = raw
        .split_once('=')
        .filter(|(k, _)| !k.trim().is_empty())
        .ok_or_else(|| SettingsError::Override(raw.to_string()))?;
    let key = key.trim();
    let value = parse_literal(value.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for (i, part) in parents.iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => {
                return Err(SettingsError::NotATable {
                    key: key.to_string(),
                    at: parts[..=i].join("."),
                })
            }
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// The effective configuration as TOML, written next to every run's outputs.
pub fn to_toml(config: &RunConfig) -> String {
    toml::to_string_pretty(config).expect("run config serializes to TOML")
}
