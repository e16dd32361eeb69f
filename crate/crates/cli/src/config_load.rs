//! Configuration assembly: defaults, optional JSON file, repeatable
//! `--set key=value` overrides by dotted path, then flag overrides.

use crate::CliError;
use serde_json::Value;
use std::path::Path;
use vstab_core::config::RunConfig;
use vstab_core::pipeline::ExecMode;

pub fn load(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    mode: Option<&str>,
) -> Result<RunConfig, CliError> {
    let mut value = serde_json::to_value(RunConfig::default()).expect("defaults serialize");

    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let file_value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))?;
        merge(&mut value, &file_value);
    }

    for item in sets {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set '{item}' is not KEY=VALUE")))?;
        // Parse the value as JSON when possible, else treat it as a string.
        let parsed: Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut value, key, parsed)
            .map_err(|e| CliError::Config(format!("--set {key}: {e}")))?;
    }

    let mut cfg: RunConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Config(format!("invalid configuration: {e}")))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = match mode {
            "sequential" => ExecMode::Sequential,
            _ => ExecMode::Pipeline,
        };
    }
    cfg.validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Deep-merge `other` into `base` (objects merge, everything else replaces).
fn merge(base: &mut Value, other: &Value) {
    match (base, other) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn set_path(root: &mut Value, key: &str, new: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| format!("'{}' is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), new);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err("empty key".into())
}
