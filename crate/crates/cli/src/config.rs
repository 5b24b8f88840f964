//! Run configuration and `--section.key value` overrides.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use drum_core::lidar::{SensorIntrinsics, ToySceneConfig};
use drum_core::model::{Architecture, TrainConfig};
use drum_core::sampler::SamplerConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sampler: SamplerConfig,
    pub train: TrainConfig,
    pub model: Architecture,
    pub toy: ToySceneConfig,
    pub sensor: SensorIntrinsics,
    /// Input and output locations of the run, filled in by each command.
    pub paths: BTreeMap<String, String>,
}

/// Short flags that expand to dotted keys.
const ALIASES: &[(&str, &str)] = &[
    ("guidance-scale", "sampler.guidance.guidance_scale"),
    ("cycles", "sampler.resample_cycles"),
];

/// Dotted key → JSON path, accepting kebab-case and the `guidance.` shorthand
/// for `sampler.guidance.`.
fn key_path(key: &str) -> Vec<String> {
    let key = ALIASES
        .iter()
        .find(|(alias, _)| *alias == key)
        .map_or(key, |(_, full)| full);
    let mut parts: Vec<String> = key.split('.').map(|p| p.replace('-', "_")).collect();
    if parts.first().map(String::as_str) == Some("guidance") {
        parts.insert(0, "sampler".into());
    }
    parts
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &[String], value: Value, key: &str) -> Result<(), CliError> {
    let unknown = || CliError::Validation(format!("unknown config key `{key}`"));
    let (last, parents) = path.split_last().ok_or_else(unknown)?;
    let mut node = root;
    for p in parents {
        node = node.get_mut(p.as_str()).ok_or_else(unknown)?;
    }
    let obj = node.as_object_mut().ok_or_else(unknown)?;
    if parents.first().map(String::as_str) != Some("paths") && !obj.contains_key(last.as_str()) {
        return Err(unknown());
    }
    obj.insert(last.clone(), value);
    Ok(())
}

/// Splits `args` into dotted-key overrides and the remaining arguments.
///
/// Recognized forms are `--a.b value`, `--a.b=value`, and the aliases in
/// [`ALIASES`].
pub fn extract_overrides(args: &[String]) -> Result<(Vec<(String, String)>, Vec<String>), CliError> {
    let mut overrides = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        let is_override = name.contains('.') || ALIASES.iter().any(|(a, _)| *a == name);
        if !is_override {
            rest.push(arg.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| CliError::Validation(format!("missing value for --{name}")))?,
        };
        overrides.push((name.to_string(), value));
    }
    Ok((overrides, rest))
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut value = serde_json::to_value(RunConfig::default()).expect("config serializes");
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            let base: RunConfig = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            value = serde_json::to_value(base).expect("config serializes");
        }
        for (key, raw) in overrides {
            set_path(&mut value, &key_path(key), parse_value(raw), key)?;
        }
        let cfg: RunConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Validation(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.sampler.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        self.toy.validate()?;
        self.sensor.validate()?;
        Ok(())
    }

    pub fn set_path(&mut self, name: &str, path: &Path) {
        self.paths.insert(name.to_string(), path.display().to_string());
    }

    /// Writes the resolved configuration as pretty JSON.
    pub fn echo(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}
