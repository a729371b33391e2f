//! Config files, flag overrides and the config digest stamped on outputs.
//!
//! A config file (TOML or JSON) holds optional top-level `seed` and
//! `threads` plus one table per subcommand, keyed by the subcommand name.
//! Flags given on the command line replace the matching keys.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Bad invocation: unknown keys, malformed values, missing paths.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn load_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value = if path.extension().is_some_and(|e| e == "toml") {
        let t: toml::Value = toml::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        serde_json::to_value(t)?
    } else {
        serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))?
    };
    if !value.is_object() {
        return Err(usage(format!("config {} must be a table/object", path.display())));
    }
    Ok(value)
}

/// Global settings: flag, then config file, then default.
pub fn global<T: DeserializeOwned>(file: &Value, key: &str, flag: Option<T>) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match file.get(key) {
        None => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| usage(format!("config key `{key}`: {e}"))),
    }
}

/// Overlays non-null flag values onto the subcommand's config table and
/// deserializes the result.
pub fn resolve<T, F>(file: &Value, section: &str, flags: &F) -> Result<T>
where
    T: DeserializeOwned + Serialize,
    F: Serialize,
{
    let mut merged = match file.get(section) {
        None => Map::new(),
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return Err(usage(format!("config section `{section}` must be a table"))),
    };
    if let Value::Object(f) = serde_json::to_value(flags)? {
        merged.extend(f.into_iter().filter(|(_, v)| !v.is_null()));
    }
    let keys: Vec<String> = merged.keys().cloned().collect();
    let resolved: T =
        serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("{section}: {e}")))?;
    if let Value::Object(known) = serde_json::to_value(&resolved)? {
        if let Some(k) = keys.iter().find(|k| !known.contains_key(*k)) {
            return Err(usage(format!("{section}: unknown config key `{k}`")));
        }
    }
    Ok(resolved)
}

/// Hex SHA-256 of the canonical (key-sorted, compact) JSON of the stage
/// parameters. Paths are left out so relocating a run keeps the digest.
pub fn digest<P: Serialize>(command: &str, seed: u64, params: &P) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::json!({
        "command": command,
        "seed": seed,
        "params": params,
    }))?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

pub fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref().ok_or_else(|| {
        usage(format!(
            "missing required --{} (or `{key}` in the config file)",
            key.replace('_', "-")
        ))
    })
}
