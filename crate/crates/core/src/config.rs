//! Flat `key=value` run configuration with flag overrides.
//!
//! Precedence is flag > file > default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use crate::dataio::{Modality, SplitOptions};
use crate::graphs::GraphParams;
use crate::model::{parse_modalities, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected key=value")]
    Syntax { line: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("missing required key {0}")]
    Missing(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub features_visual: Option<PathBuf>,
    pub features_textual: Option<PathBuf>,
    pub kcore: usize,
    pub split: SplitOptions,
    pub graph: GraphParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval_mask_valid: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            interactions: None,
            features_visual: None,
            features_textual: None,
            kcore: 5,
            split: SplitOptions::default(),
            graph: GraphParams::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval_mask_valid: false,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "data.interactions",
    "data.features.visual",
    "data.features.textual",
    "data.kcore",
    "split.seed",
    "split.strategy",
    "split.strict",
    "graph.k_user",
    "graph.k_item",
    "graph.alpha_visual",
    "model.dim",
    "model.layers_bipartite",
    "model.layers_user",
    "model.layers_item",
    "model.fusion",
    "model.modalities",
    "model.components",
    "model.item_row_norm",
    "train.lr",
    "train.lambda",
    "train.reg_scope",
    "train.batch_size",
    "train.max_epochs",
    "train.patience",
    "train.seed",
    "eval.mask_valid",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        reason: e.to_string(),
    })
}

fn path_opt(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "data.interactions" => self.interactions = path_opt(value),
            "data.features.visual" => self.features_visual = path_opt(value),
            "data.features.textual" => self.features_textual = path_opt(value),
            "data.kcore" => self.kcore = parse(key, value)?,
            "split.seed" => self.split.seed = parse(key, value)?,
            "split.strategy" => self.split.strategy = parse(key, value)?,
            "split.strict" => self.split.strict = parse(key, value)?,
            "graph.k_user" => self.graph.k_user = parse(key, value)?,
            "graph.k_item" => self.graph.k_item = parse(key, value)?,
            "graph.alpha_visual" => self.graph.alpha_visual = parse(key, value)?,
            "model.dim" => self.model.dim = parse(key, value)?,
            "model.layers_bipartite" => self.model.layers_bipartite = parse(key, value)?,
            "model.layers_user" => self.model.layers_user = parse(key, value)?,
            "model.layers_item" => self.model.layers_item = parse(key, value)?,
            "model.fusion" => self.model.fusion = parse(key, value)?,
            "model.modalities" => {
                self.model.modalities = parse_modalities(value).map_err(|reason| ConfigError::BadValue {
                    key: key.to_string(),
                    reason,
                })?
            }
            "model.components" => self.model.components = parse(key, value)?,
            "model.item_row_norm" => self.model.item_row_norm = parse(key, value)?,
            "train.lr" => self.train.learning_rate = parse(key, value)?,
            "train.lambda" => self.train.reg_lambda = parse(key, value)?,
            "train.reg_scope" => self.train.reg_scope = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, value)?,
            "train.patience" => self.train.patience = parse(key, value)?,
            "train.seed" => self.train.seed = parse(key, value)?,
            "eval.mask_valid" => self.eval_mask_valid = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "data.interactions" => path_str(&self.interactions),
            "data.features.visual" => path_str(&self.features_visual),
            "data.features.textual" => path_str(&self.features_textual),
            "data.kcore" => self.kcore.to_string(),
            "split.seed" => self.split.seed.to_string(),
            "split.strategy" => self.split.strategy.to_string(),
            "split.strict" => self.split.strict.to_string(),
            "graph.k_user" => self.graph.k_user.to_string(),
            "graph.k_item" => self.graph.k_item.to_string(),
            "graph.alpha_visual" => self.graph.alpha_visual.to_string(),
            "model.dim" | "model.layers_bipartite" | "model.layers_user" | "model.layers_item" | "model.fusion"
            | "model.modalities" | "model.components" | "model.item_row_norm" => {
                m.to_pairs().into_iter().find(|(k, _)| k == key).map(|(_, v)| v)?
            }
            "train.lr" => t.learning_rate.to_string(),
            "train.lambda" => t.reg_lambda.to_string(),
            "train.reg_scope" => t.reg_scope.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.seed" => t.seed.to_string(),
            "eval.mask_valid" => self.eval_mask_valid.to_string(),
            _ => return None,
        })
    }

    /// Applies `key=value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    /// Resolved `(key, value)` pairs for the given key prefixes (all keys if empty).
    pub fn pairs(&self, prefixes: &[&str]) -> Vec<(String, String)> {
        KEYS.iter()
            .filter(|k| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.pairs(&[]).into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn feature_path(&self, m: Modality) -> Option<&PathBuf> {
        match m {
            Modality::Visual => self.features_visual.as_ref(),
            Modality::Textual => self.features_textual.as_ref(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        if self.kcore == 0 {
            return Err(bad("data.kcore", "must be >= 1"));
        }
        if self.graph.k_user == 0 {
            return Err(bad("graph.k_user", "must be >= 1"));
        }
        if self.graph.k_item == 0 {
            return Err(bad("graph.k_item", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.graph.alpha_visual) {
            return Err(bad("graph.alpha_visual", "must lie in [0, 1]"));
        }
        self.model.validate().map_err(|e| bad("model", &e.to_string()))?;
        self.train.validate().map_err(|e| bad("train", &e.to_string()))?;
        Ok(())
    }
}
