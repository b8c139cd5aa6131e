use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Criterion used to pick the epoch whose parameters are kept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectBy {
    #[default]
    ValLoss,
    ValUar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub classes: Vec<String>,
    pub select_by: SelectBy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 50,
            lr0: 1e-3,
            plateau_patience: 10,
            lr_factor: 0.5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            classes: ["neutral", "happy", "angry", "sad"].map(String::from).to_vec(),
            select_by: SelectBy::ValLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return fail("batch_size, max_epochs and plateau_patience must be positive".into());
        }
        if self.plateau_patience >= self.max_epochs {
            return fail(format!(
                "plateau_patience ({}) must be below max_epochs ({})",
                self.plateau_patience, self.max_epochs
            ));
        }
        let positive = [
            ("lr0", self.lr0),
            ("lr_factor", self.lr_factor),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
        ];
        if let Some((k, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return fail(format!("`{k}` must be positive, got {v}"));
        }
        if self.adam_beta1 >= 1.0 || self.adam_beta2 >= 1.0 || self.lr_factor >= 1.0 {
            return fail("adam betas and lr_factor must be below 1".into());
        }
        if self.classes.len() < 2 {
            return fail("need at least two classes".into());
        }
        let mut sorted = self.classes.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return fail("duplicate class names".into());
        }
        Ok(())
    }
}

/// Training and model settings, stored as one flat TOML table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
}

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "max_epochs",
    "lr0",
    "plateau_patience",
    "lr_factor",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "classes",
    "select_by",
];

impl RunConfig {
    /// Parses a flat table; every key belongs to either the training or the
    /// model record, and unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let (train, model): (toml::Table, toml::Table) =
            table.into_iter().partition(|(k, _)| TRAIN_KEYS.contains(&k.as_str()));
        let train: TrainConfig = toml::Value::Table(train)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let model: ModelConfig = toml::Value::Table(model)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let cfg = RunConfig { train, model };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()
    }

    pub fn to_toml_string(&self) -> String {
        let mut table = toml::Table::try_from(&self.train).expect("plain struct");
        table.extend(toml::Table::try_from(&self.model).expect("plain struct"));
        toml::to_string(&table).expect("serializable table")
    }
}
