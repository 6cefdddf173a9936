//! Run configuration: sections `model`, `data`, `train`, `loss`, `eval`.
//!
//! Values are layered as defaults < TOML file < environment < `--set`
//! overrides. Environment overrides look like `CLCC_TRAIN__LR=0.0005`
//! (section and key separated by a double underscore). Override values are
//! parsed as TOML literals and fall back to plain strings.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::evaluation::MetricOptions;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

pub const ENV_PREFIX: &str = "CLCC_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset directory with `images/` and `masks/`; synthetic data when unset.
    pub root: Option<PathBuf>,
    /// Reuse an existing split manifest instead of drawing a new split.
    pub manifest: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_seed: u64,
    pub image_side: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub labeled_fraction: f64,
    pub split_seed: u64,
    pub labeled_seed: u64,
    /// Random flips on training samples.
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SplitSpec::default();
        Self {
            root: None,
            manifest: None,
            synthetic_count: 200,
            synthetic_seed: 0,
            image_side: 320,
            train_fraction: s.train_fraction,
            val_fraction: s.val_fraction,
            test_fraction: s.test_fraction,
            labeled_fraction: s.labeled_fraction,
            split_seed: s.split_seed,
            labeled_seed: s.labeled_seed,
            augment: false,
        }
    }
}

impl DataConfig {
    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            split_seed: self.split_seed,
            labeled_seed: self.labeled_seed,
            train_fraction: self.train_fraction,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
            labeled_fraction: self.labeled_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    /// Epochs `0..stage1_epochs` train with the contrastive term, the rest
    /// with the consistency term.
    pub stage1_epochs: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            total_epochs: 300,
            stage1_epochs: 100,
            labeled_per_batch: 4,
            unlabeled_per_batch: 4,
            lr: o.lr,
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("train.total_epochs must be at least 1".into()));
        }
        if self.stage1_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "train.stage1_epochs ({}) exceeds train.total_epochs ({})",
                self.stage1_epochs, self.total_epochs
            )));
        }
        if self.labeled_per_batch == 0 {
            return Err(Error::Config("train.labeled_per_batch must be at least 1".into()));
        }
        self.optimizer().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    /// Contrastive weight during the first stage.
    pub alpha: f64,
    /// Consistency weight during the second stage.
    pub beta: f64,
    /// Negatives per anchor; every other grid cell when unset.
    pub negatives: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 1.0,
            beta: 1.0,
            negatives: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: MetricOptions,
}

impl Config {
    /// Small CPU profile: 64x64 images and the desk-scale model.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            data: DataConfig {
                image_side: 64,
                ..DataConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model
            .check_image_size(self.data.image_side, self.data.image_side)?;
        self.data.split_spec().validate()?;
        if self.data.root.is_none() && self.data.synthetic_count == 0 {
            return Err(Error::Config("data.synthetic_count must be positive".into()));
        }
        self.train.validate()?;
        LossWeights::new(self.loss.alpha, self.loss.beta, self.loss.tau)?;
        if self.loss.negatives == Some(0) {
            return Err(Error::Config("loss.negatives must be positive when set".into()));
        }
        Ok(())
    }

    /// Defaults overlaid with `file` (if any), then environment pairs, then
    /// `key=value` overrides.
    pub fn resolve<I, K, V>(file: Option<&Path>, env: I, overrides: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut tree = serde_json::to_value(Config::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| Error::file(path, e))?;
            merge_file(&mut tree, serde_json::to_value(table)?)?;
        }
        for (k, v) in env {
            if let Some(key) = env_key(k.as_ref()) {
                set_key(&mut tree, &key, parse_value(v.as_ref()))?;
            }
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_key(&mut tree, key.trim(), parse_value(raw.trim()))?;
        }
        let config: Config =
            serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::file(path, e))
    }
}

/// Every `section.key` accepted by [`Config::resolve`].
pub fn valid_keys() -> Vec<String> {
    let tree = serde_json::to_value(Config::default()).expect("config serialises");
    let mut keys = Vec::new();
    for (section, body) in tree.as_object().expect("sections") {
        for key in body.as_object().expect("section table").keys() {
            keys.push(format!("{section}.{key}"));
        }
    }
    keys
}

fn unknown(key: &str) -> Error {
    Error::UnknownKey {
        key: key.to_string(),
        valid: valid_keys(),
    }
}

fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    let (section, key) = rest.split_once("__")?;
    Some(format!("{}.{}", section.to_lowercase(), key.to_lowercase()))
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v")).unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn slot<'a>(tree: &'a mut Value, section: &str, key: &str) -> Option<&'a mut Value> {
    tree.get_mut(section)?.as_object_mut()?.get_mut(key)
}

fn set_key(tree: &mut Value, dotted: &str, value: Value) -> Result<()> {
    let (section, key) = dotted.split_once('.').ok_or_else(|| unknown(dotted))?;
    let target = slot(tree, section, key).ok_or_else(|| unknown(dotted))?;
    *target = value;
    Ok(())
}

fn merge_file(tree: &mut Value, file: Value) -> Result<()> {
    let sections: Map<String, Value> = match file {
        Value::Object(m) => m,
        _ => return Err(Error::Config("config file must be a table".into())),
    };
    for (section, body) in sections {
        let Value::Object(entries) = body else {
            return Err(unknown(&section));
        };
        for (key, value) in entries {
            set_key(tree, &format!("{section}.{key}"), value)?;
        }
    }
    Ok(())
}
