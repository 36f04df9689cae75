//! Run configuration: typed defaults overlaid with flat `dotted.key = value`
//! lines whose values are JSON literals.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expert::RrtConfig;
use crate::geometry::SuiteSpec;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` is not a table")]
    NotATable { line: usize, key: String },
    #[error("invalid value: {0}")]
    Invalid(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; overrides `train.seed` when training through the CLI.
    pub seed: u64,
    pub suite_train: SuiteSpec,
    pub suite_unseen: SuiteSpec,
    pub train: TrainConfig,
    pub expert: RrtConfig,
    /// Transitions gathered by `collect-demos`.
    pub demo_count: usize,
    pub demo_include_failures: bool,
    pub eval_trials: usize,
    /// Checkpoint cadence in episodes; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            suite_train: SuiteSpec::training(),
            suite_unseen: SuiteSpec::unseen(),
            train: TrainConfig::default(),
            expert: RrtConfig::default(),
            demo_count: 10_000,
            demo_include_failures: false,
            eval_trials: 4,
            checkpoint_every: 100,
        }
    }
}

impl RunConfig {
    /// Training settings with the master seed applied.
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment;
    /// values that are not valid JSON are taken as bare strings.
    pub fn overlay(&self, text: &str) -> Result<RunConfig, ConfigError> {
        let mut tree = serde_json::to_value(self)?;
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let key = key.trim();
            let value = value.trim();
            let parsed = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
            set_path(&mut tree, key, parsed, line)?;
        }
        Ok(serde_json::from_value(tree)?)
    }

    pub fn set(&self, key: &str, value: Value) -> Result<RunConfig, ConfigError> {
        let mut tree = serde_json::to_value(self)?;
        set_path(&mut tree, key, value, 0)?;
        Ok(serde_json::from_value(tree)?)
    }

    /// Every leaf as `key = value`, in a form `overlay` reads back.
    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        flatten(&tree, String::new(), &mut out);
        out
    }

    /// sha256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn set_path(tree: &mut Value, key: &str, value: Value, line: usize) -> Result<(), ConfigError> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| ConfigError::NotATable {
            line,
            key: parts[..depth].join("."),
        })?;
        let child = map.get_mut(*part).ok_or_else(|| ConfigError::UnknownKey {
            line,
            key: key.to_string(),
        })?;
        if depth + 1 == parts.len() {
            *child = value;
            return Ok(());
        }
        node = child;
    }
    unreachable!("split yields at least one part")
}

fn flatten(v: &Value, prefix: String, out: &mut String) {
    match v {
        // tagged enums and plain arrays stay whole
        Value::Object(map) if !map.contains_key("kind") => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(child, key, out);
            }
        }
        _ => {
            out.push_str(&format!("{prefix} = {v}\n"));
        }
    }
}
