//! Experiment configuration and its flat `key = value` file format.
//!
//! One setting per line, `#` starts a comment, keys are dotted paths such as
//! `backbone.window_size`. Unknown or repeated keys are errors. Lists are
//! comma-separated; `auto` and `off` mark unset optional values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    /// Directory holding `train.kdst`, `val.kdst` and `test.kdst`.
    pub data_dir: PathBuf,
    pub ablation_seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            data_dir: PathBuf::from("data"),
            ablation_seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "backbone.image_size",
    "backbone.in_channels",
    "backbone.patch_size",
    "backbone.embed_dim",
    "backbone.depths",
    "backbone.num_heads",
    "backbone.window_size",
    "backbone.mlp_ratio",
    "backbone.init_std",
    "fusion.embed_dim",
    "heads.kind",
    "heads.grades",
    "heads.hidden",
    "loss.lambda",
    "loss.ncsl",
    "loss.bce_eps",
    "train.optimizer",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch_size",
    "train.epochs",
    "train.patience",
    "train.stop_at_train_accuracy",
    "train.eval_batch_size",
    "data.dir",
    "ablation.seeds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items = value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("{key}: empty list")));
    }
    Ok(items)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bb = &mut self.model.backbone;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "backbone.image_size" => bb.image_size = parse(key, v)?,
            "backbone.in_channels" => bb.in_channels = parse(key, v)?,
            "backbone.patch_size" => bb.patch_size = parse(key, v)?,
            "backbone.embed_dim" => bb.embed_dim = parse(key, v)?,
            "backbone.depths" => bb.depths = parse_list(key, v)?,
            "backbone.num_heads" => bb.num_heads = parse_list(key, v)?,
            "backbone.window_size" => bb.window_size = parse(key, v)?,
            "backbone.mlp_ratio" => bb.mlp_ratio = parse(key, v)?,
            "backbone.init_std" => self.model.init_std = parse(key, v)?,
            "fusion.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "heads.kind" => self.model.head = v.parse()?,
            "heads.grades" => self.model.grades = parse(key, v)?,
            "heads.hidden" => {
                self.model.hidden = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.ncsl" => self.loss.ncsl_enabled = parse_bool(key, v)?,
            "loss.bce_eps" => self.loss.bce_eps = parse(key, v)?,
            "train.optimizer" => self.train.optimizer.kind = v.parse()?,
            "train.lr" => self.train.optimizer.lr = parse(key, v)?,
            "train.beta1" => self.train.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => self.train.optimizer.beta2 = parse(key, v)?,
            "train.eps" => self.train.optimizer.eps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.stop_at_train_accuracy" => {
                self.train.stop_at_train_accuracy = if v == "off" { None } else { Some(parse(key, v)?) }
            }
            "train.eval_batch_size" => self.train.eval_batch_size = parse(key, v)?,
            "data.dir" => self.data_dir = PathBuf::from(v),
            "ablation.seeds" => self.ablation_seeds = parse_list(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let bb = &self.model.backbone;
        Some(match key {
            "seed" => self.seed.to_string(),
            "backbone.image_size" => bb.image_size.to_string(),
            "backbone.in_channels" => bb.in_channels.to_string(),
            "backbone.patch_size" => bb.patch_size.to_string(),
            "backbone.embed_dim" => bb.embed_dim.to_string(),
            "backbone.depths" => join(&bb.depths),
            "backbone.num_heads" => join(&bb.num_heads),
            "backbone.window_size" => bb.window_size.to_string(),
            "backbone.mlp_ratio" => bb.mlp_ratio.to_string(),
            "backbone.init_std" => self.model.init_std.to_string(),
            "fusion.embed_dim" => self.model.embed_dim.to_string(),
            "heads.kind" => self.model.head.to_string(),
            "heads.grades" => self.model.grades.to_string(),
            "heads.hidden" => self.model.hidden.map_or("auto".into(), |h| h.to_string()),
            "loss.lambda" => self.loss.lambda.to_string(),
            "loss.ncsl" => self.loss.ncsl_enabled.to_string(),
            "loss.bce_eps" => self.loss.bce_eps.to_string(),
            "train.optimizer" => self.train.optimizer.kind.to_string(),
            "train.lr" => self.train.optimizer.lr.to_string(),
            "train.beta1" => self.train.optimizer.beta1.to_string(),
            "train.beta2" => self.train.optimizer.beta2.to_string(),
            "train.eps" => self.train.optimizer.eps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.epochs" => self.train.epochs.to_string(),
            "train.patience" => self.train.patience.to_string(),
            "train.stop_at_train_accuracy" => self
                .train
                .stop_at_train_accuracy
                .map_or("off".into(), |a| a.to_string()),
            "train.eval_batch_size" => self.train.eval_batch_size.to_string(),
            "data.dir" => self.data_dir.display().to_string(),
            "ablation.seeds" => join(&self.ablation_seeds),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {raw:?}",
                    n + 1
                )));
            };
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: repeated key {key:?}", n + 1)));
            }
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
        self.set(key.trim(), value)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key).expect("listed key"));
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        ExperimentConfig::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::file(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}
