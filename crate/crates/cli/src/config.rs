//! Run configurations: JSON files merged with `--set key.path=value`
//! overrides and the `RESNAS_SEED` environment variable.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use resnas::model::{fixture, ArchConfig};
use resnas::search::{builtin_space, EvoConfig, SearchSpaceDef};
use resnas::train::TrainConfig;

use crate::CliError;

pub const SEED_ENV: &str = "RESNAS_SEED";

/// A built-in fixture name or an inline architecture.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchRef {
    Name(String),
    Inline(ArchConfig),
}

impl ArchRef {
    pub fn resolve(&self) -> Result<ArchConfig, CliError> {
        match self {
            ArchRef::Name(n) => fixture(n).ok_or_else(|| CliError::config(format!("unknown architecture `{n}`"))),
            ArchRef::Inline(c) => Ok(c.clone()),
        }
    }
}

/// A built-in search space name or an inline definition.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
pub enum SpaceRef {
    Name(String),
    Inline(SearchSpaceDef),
}

impl SpaceRef {
    pub fn resolve(&self) -> Result<SearchSpaceDef, CliError> {
        let space = match self {
            SpaceRef::Name(n) => builtin_space(n).ok_or_else(|| CliError::config(format!("unknown search space `{n}`")))?,
            SpaceRef::Inline(s) => s.clone(),
        };
        space.validate()?;
        Ok(space)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    pub arch: ArchRef,
    #[serde(default)]
    pub train: TrainConfig,
    /// Samples per class held out for evaluation; 0 trains on everything.
    #[serde(default)]
    pub val_per_class: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupernetRun {
    pub space: SpaceRef,
    #[serde(default)]
    pub train: TrainConfig,
    /// Sub-validation samples per class, excluded from training.
    #[serde(default = "default_val_per_class")]
    pub val_per_class: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchRun {
    pub space: SpaceRef,
    #[serde(default)]
    pub evo: EvoConfig,
    #[serde(default)]
    pub seed: u64,
    /// Replaces the space's own MAC limit.
    #[serde(default)]
    pub constraint_macs: Option<u64>,
    /// Must match the split used when the super-network was trained.
    #[serde(default = "default_val_per_class")]
    pub val_per_class: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    /// Scores genes with a seeded separable landscape instead of a
    /// super-network.
    #[serde(default)]
    pub synthetic_fitness: bool,
}

fn default_val_per_class() -> usize {
    25
}

fn default_eval_batch() -> usize {
    64
}

/// Sets `key.path` in `root`, creating objects along the way. The value is
/// parsed as JSON when possible, else taken as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::config(format!("override key `{path}` has an empty segment")));
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        if !node.is_object() {
            return Err(CliError::config(format!("override `{path}`: `{}` is not an object", keys[..i].join("."))));
        }
        let map = node.as_object_mut().unwrap();
        if i + 1 == keys.len() {
            map.insert(key.to_string(), value);
            return Ok(());
        }
        node = map.entry(key.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("keys is nonempty")
}

pub fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Applies overrides then deserializes.
pub fn resolve<T: DeserializeOwned>(mut value: Value, overrides: &[String]) -> Result<T, CliError> {
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| CliError::config(format!("invalid config: {e}")))
}

/// The seed from `RESNAS_SEED` when set.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| CliError::config(format!("{SEED_ENV}=`{s}` is not an integer"))),
        Err(_) => Ok(None),
    }
}
