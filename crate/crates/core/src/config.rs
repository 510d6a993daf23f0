//! Run configuration: one JSON document of dotted keys over nested defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::augment::AugmentPlan;
use crate::data::synth::SynthConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset manifest used by `train`, `caption` and `ablate`.
    pub manifest: Option<PathBuf>,
    pub min_count: usize,
    /// Resample images whose size differs from the encoder resolution.
    pub resize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            min_count: 1,
            resize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub augment: AugmentPlan,
    pub metrics: MetricConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            augment: AugmentPlan::default(),
            metrics: MetricConfig::default(),
        }
    }
}

/// Free-form maps: replaced wholesale rather than merged key by key.
const MAP_KEYS: [&str; 1] = ["augment.per_category"];

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    set_relative(root, key, key, value)
}

/// Sets `rel` (dotted, relative to `node`); `full` is the absolute key.
fn set_relative(node: &mut Value, rel: &str, full: &str, value: Value) -> Result<()> {
    let unknown = || Error::Config(format!("unknown config key {full:?}"));
    let mut cur = node;
    for part in rel.split('.') {
        cur = cur.as_object_mut().ok_or_else(unknown)?.get_mut(part).ok_or_else(unknown)?;
    }
    match value {
        // objects merge key by key, so every nested key must already exist
        Value::Object(map) if cur.is_object() && !MAP_KEYS.contains(&full) => {
            for (k, v) in map {
                set_relative(cur, &k, &format!("{full}.{k}"), v)?;
            }
        }
        v => *cur = v,
    }
    Ok(())
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(map) if !map.is_empty() && !MAP_KEYS.contains(&prefix) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

impl RunConfig {
    /// Applies a JSON object of dotted (or nested) keys over the defaults.
    pub fn from_value(doc: &Value) -> Result<Self> {
        let mut base = serde_json::to_value(Self::default())?;
        let map = doc
            .as_object()
            .ok_or_else(|| Error::Config("config document must be a JSON object".into()))?;
        for (k, v) in map {
            set_path(&mut base, k, v.clone())?;
        }
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads an optional config file, then applies `key=value` overrides.
    /// Override values are parsed as JSON, falling back to a plain string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Map::new()),
        };
        let map = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("config document must be a JSON object".into()))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            map.insert(k.trim().to_string(), v);
        }
        Self::from_value(&doc)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        self.augment.validate()?;
        if self.data.min_count == 0 {
            return Err(Error::Config("data.min_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Every leaf as a dotted key, sorted.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_flat_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical flat form.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(&self.to_flat()).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }
}
