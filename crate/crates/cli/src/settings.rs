//! Config files, `--set` overrides and run manifests.

use cool::error::{Error, Result};
use std::path::Path;
use toml::{Table, Value};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Reads a config file. A manifest written by an earlier run is accepted
/// too: its `[config]` table is used and `seed` is returned alongside.
pub fn read_config_file(path: &Path) -> Result<(Table, Option<u64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut table: Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(Value::Table(cfg)) = table.remove("config") {
        let seed = match table.get("seed") {
            Some(Value::Integer(s)) if *s >= 0 => Some(*s as u64),
            Some(other) => {
                return Err(Error::Config(format!("manifest seed must be a non-negative integer, got {other}")))
            }
            None => None,
        };
        return Ok((cfg, seed));
    }
    Ok((table, None))
}

/// Parses `key=value`; the value is read as a TOML literal and falls back to
/// a bare string.
pub fn parse_override(raw: &str) -> Result<(String, Value)> {
    let (key, value) =
        raw.split_once('=').ok_or_else(|| Error::Config(format!("override `{raw}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{raw}` has an empty key")));
    }
    let value = value.trim();
    let parsed = toml::from_str::<Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(value.to_string()));
    Ok((key.to_string(), parsed))
}

pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for raw in overrides {
        let (k, v) = parse_override(raw)?;
        table.insert(k, v);
    }
    Ok(())
}

pub fn overlay(base: &mut Table, top: Table) {
    for (k, v) in top {
        base.insert(k, v);
    }
}

pub fn to_table<T: serde::Serialize>(value: &T) -> Result<Table> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
}

pub fn from_table<T: serde::de::DeserializeOwned>(table: &Table) -> Result<T> {
    let text = toml::to_string(table).map_err(|e| Error::Config(e.to_string()))?;
    toml::from_str(&text).map_err(|e| Error::Config(e.message().to_string()))
}

/// Writes `manifest.toml`: tool version, command, seed, any `extra` keys
/// and the resolved config, in a form `--config` reads back.
pub fn write_manifest<T: serde::Serialize>(
    out: &Path,
    command: &str,
    seed: u64,
    config: &T,
    extra: Table,
) -> Result<()> {
    let mut doc = extra;
    doc.insert("command".into(), Value::String(command.into()));
    doc.insert("version".into(), Value::String(VERSION.into()));
    doc.insert("seed".into(), Value::Integer(seed as i64));
    doc.insert("config".into(), Value::Table(to_table(config)?));
    let text = format!("# cool {VERSION}\n{}", toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?);
    let path = out.join("manifest.toml");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// `"3,6,12"` or `"1..12"` (inclusive).
pub fn parse_horizons(raw: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse horizons `{raw}`; use a list like 3,6,12 or a range like 1..12"));
    if let Some((a, b)) = raw.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a == 0 || b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    raw.split(',').map(|s| s.trim().parse::<usize>().map_err(|_| bad())).collect()
}
