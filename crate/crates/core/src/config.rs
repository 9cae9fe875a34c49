//! Run configuration: one TOML file with `[sim]`, `[train]` and `[probe]`
//! tables, plus dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::probe::ProbeConfig;
use crate::sim::PackConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub sim: PackConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

fn defaults_table() -> Result<Table> {
    match Value::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))? {
        Value::Table(t) => Ok(t),
        _ => Err(Error::Config("default config is not a table".into())),
    }
}

fn merge(dst: &mut Table, src: Table, prefix: &str) -> Result<()> {
    for (key, value) in src {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match (dst.get_mut(&key), value) {
            (None, _) => return Err(Error::Config(format!("unknown key `{path}`"))),
            (Some(Value::Table(d)), Value::Table(s)) => merge(d, s, &path)?,
            (Some(Value::Table(_)), _) => {
                return Err(Error::Config(format!("`{path}` is a table, not a value")));
            }
            (Some(slot), v) => *slot = v,
        }
    }
    Ok(())
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back
/// to a bare string (`--set train.manifest=data/manifest.json`).
pub fn parse_override_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key inside `table`; every path segment must already exist.
pub fn apply_override(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for (i, part) in parts.iter().enumerate() {
        let so_far = parts[..=i].join(".");
        let slot = cur
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown key `{so_far}`")))?;
        if i + 1 == parts.len() {
            if slot.is_table() {
                return Err(Error::Config(format!("`{key}` is a table, not a value")));
            }
            *slot = parse_override_value(raw);
            return Ok(());
        }
        cur = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{so_far}` is not a table")))?;
    }
    unreachable!("loop returns on the last segment")
}

/// Splits `key=value`.
pub fn split_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Config {
    /// Defaults, then the optional file, then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut table = defaults_table()?;
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let file: Table = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut table, file, "")?;
        }
        for (k, v) in overrides {
            apply_override(&mut table, k, v)?;
        }
        let config: Config = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.train.validate()?;
        config.sim.sim.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.train.seed = seed;
        self.probe.seed = seed;
    }
}
