//! Run configuration: one TOML document for data generation, the model and
//! training, with dotted `KEY=VALUE` overrides applied before validation.
//!
//! ```toml
//! seed = 0
//! image_size = 256
//! count = 100
//!
//! [model]
//! width_multiplier = 1.0
//!
//! [train]
//! epochs = 200
//! decay_start_epoch = 100
//!
//! [data]
//! light_counts = [1, 2, 3]
//! ```
//!
//! `image_size` and `seed` live at the top level only; they are copied into
//! `model.input_size`, `train.image_size`, `data.height`, `data.width` and
//! `train.seed`, which are rejected if given directly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

const DERIVED_KEYS: [&str; 5] = ["model.input_size", "train.image_size", "train.seed", "data.height", "data.width"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub image_size: usize,
    /// Samples written by `gen-data`.
    pub count: usize,
    /// Generation workers; 0 uses the available parallelism.
    pub threads: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let image_size = TrainConfig::default().image_size;
        let mut cfg = Self {
            seed: 0,
            image_size,
            count: 100,
            threads: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: GenConfig::default(),
        };
        cfg.propagate();
        cfg
    }
}

impl RunConfig {
    /// Parses a document, applies `overrides` and validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for key in DERIVED_KEYS {
            if lookup(&table, key).is_some() {
                let top = if key.ends_with("seed") { "seed" } else { "image_size" };
                return Err(Error::Config(format!("`{key}` is derived; set top-level `{top}` instead")));
            }
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.propagate();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or starts from the defaults when `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Reduced setting that trains on a desktop CPU in minutes: 64×64
    /// images, a quarter-width network, 30 epochs with decay from epoch 15,
    /// and 400 samples split 300/50/50.
    pub fn desk() -> Self {
        let mut cfg = Self {
            image_size: 64,
            count: 400,
            model: ModelConfig {
                width_multiplier: 0.25,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 30,
                decay_start_epoch: 15,
                ..TrainConfig::default()
            },
            data: GenConfig {
                split_ratios: [0.75, 0.125, 0.125],
                ..GenConfig::default()
            },
            ..Self::default()
        };
        cfg.propagate();
        cfg
    }

    /// The configuration stored with a training run; data settings keep
    /// their defaults.
    pub fn from_run(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        if model.input_size != train.image_size {
            return Err(Error::Config(format!(
                "model input_size {} differs from image_size {}",
                model.input_size, train.image_size
            )));
        }
        let mut cfg = Self {
            seed: train.seed,
            image_size: train.image_size,
            model: model.clone(),
            train: train.clone(),
            ..Self::default()
        };
        cfg.propagate();
        Ok(cfg)
    }

    fn propagate(&mut self) {
        self.model.input_size = self.image_size;
        self.train.image_size = self.image_size;
        self.train.seed = self.seed;
        self.data.height = self.image_size;
        self.data.width = self.image_size;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate();
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// The document with derived keys removed, loadable by [`RunConfig::from_toml`].
    pub fn to_toml(&self) -> Result<String> {
        let mut table = Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for key in DERIVED_KEYS {
            let (section, leaf) = key.split_once('.').expect("dotted key");
            if let Some(Value::Table(t)) = table.get_mut(section) {
                t.remove(leaf);
            }
        }
        toml::to_string_pretty(&table).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn effective_threads(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}

fn lookup<'a>(table: &'a Table, key: &str) -> Option<&'a Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// `a.b.c=VALUE`: VALUE is read as a TOML value, falling back to a string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not KEY=VALUE")))?;
    let key = key.trim();
    if DERIVED_KEYS.contains(&key) {
        return Err(Error::Config(format!("`{key}` is derived from a top-level key")));
    }
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Default path of the resolved configuration written next to run outputs.
pub fn resolved_path(dir: &Path) -> PathBuf {
    dir.join("config.toml")
}
