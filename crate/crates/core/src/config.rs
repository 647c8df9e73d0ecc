//! Flat `key = value` training configuration.
//!
//! Blank lines and `#` comments are ignored; unknown or repeated keys are
//! errors. [`TrainConfig::to_text`] writes every key in a fixed order and
//! parses back to an equal value.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::{OptimizerConfig, OptimizerKind};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("config not found: {0}")]
    NotFound(String),
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {message}")]
    BadValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: u64,
    /// Stop after this many updates; 0 means no cap.
    pub max_steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    /// `toy` or `paper`.
    pub profile: String,
    pub encoder_seed: u64,
    /// Optional flat weight file for the frozen encoders.
    pub encoder_weights: Option<String>,
    /// Write a checkpoint every this many updates; 0 writes only init and final.
    pub checkpoint_every: u64,
    pub min_gap: usize,
    /// Fraction of eligible videos held out by salted hash.
    pub val_fraction: f64,
    pub split_salt: String,
    /// Batches in the fixed evaluation pass reported before and after training.
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 1,
            max_steps: 0,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            profile: "toy".into(),
            encoder_seed: 0,
            encoder_weights: None,
            checkpoint_every: 0,
            min_gap: 0,
            val_fraction: 0.0,
            split_salt: "split".into(),
            eval_batches: 4,
        }
    }
}

/// Documented keys in output order.
pub const KEYS: &[&str] = &[
    "seed",
    "epochs",
    "max_steps",
    "batch_size",
    "optimizer",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "cosine_decay",
    "temperature",
    "margin",
    "lambda",
    "contrastive",
    "triplet",
    "symmetric_infonce",
    "profile",
    "encoder_seed",
    "encoder_weights",
    "checkpoint_every",
    "min_gap",
    "val_fraction",
    "split_salt",
    "eval_batches",
];

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        line,
        key: key.to_string(),
        message: e.to_string(),
    })
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: format!("expected key = value, got {content:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            c.set(line, key, value)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        if !path.exists() {
            return Err(ConfigError::NotFound(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_text(&text)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<(), ConfigError> {
        let o = &mut self.optimizer;
        let l = &mut self.loss;
        match key {
            "seed" => self.seed = parse(line, key, v)?,
            "epochs" => self.epochs = parse(line, key, v)?,
            "max_steps" => self.max_steps = parse(line, key, v)?,
            "batch_size" => self.batch_size = parse(line, key, v)?,
            "optimizer" => o.kind = parse::<OptimizerKind>(line, key, v)?,
            "lr" => o.lr = parse(line, key, v)?,
            "beta1" => o.beta1 = parse(line, key, v)?,
            "beta2" => o.beta2 = parse(line, key, v)?,
            "adam_eps" => o.eps = parse(line, key, v)?,
            "weight_decay" => o.weight_decay = parse(line, key, v)?,
            "cosine_decay" => o.cosine_decay = parse(line, key, v)?,
            "temperature" => l.temperature = parse(line, key, v)?,
            "margin" => l.margin = parse(line, key, v)?,
            "lambda" => l.lambda = parse(line, key, v)?,
            "contrastive" => l.contrastive = parse(line, key, v)?,
            "triplet" => l.triplet = parse(line, key, v)?,
            "symmetric_infonce" => l.symmetric_infonce = parse(line, key, v)?,
            "profile" => self.profile = v.to_string(),
            "encoder_seed" => self.encoder_seed = parse(line, key, v)?,
            "encoder_weights" => {
                self.encoder_weights = (!v.is_empty()).then(|| v.to_string());
            }
            "checkpoint_every" => self.checkpoint_every = parse(line, key, v)?,
            "min_gap" => self.min_gap = parse(line, key, v)?,
            "val_fraction" => self.val_fraction = parse(line, key, v)?,
            "split_salt" => self.split_salt = v.to_string(),
            "eval_batches" => self.eval_batches = parse(line, key, v)?,
            _ => unreachable!("key list checked by caller"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.batch_size == 0 {
            return invalid("batch_size must be positive");
        }
        if self.loss.contrastive && self.batch_size < 2 {
            return invalid("batch_size must be at least 2 unless contrastive = false");
        }
        if !self.loss.contrastive && !self.loss.triplet {
            return invalid("at least one of contrastive and triplet must be enabled");
        }
        self.loss
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.optimizer.lr >= 0.0 && self.optimizer.lr.is_finite()) {
            return invalid("lr must be a non-negative number");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return invalid("val_fraction must be in [0, 1)");
        }
        if ModelConfig::from_profile(&self.profile).is_none() {
            return Err(ConfigError::Invalid(format!(
                "unknown profile {:?} (expected toy or paper)",
                self.profile
            )));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::from_profile(&self.profile).expect("validated profile");
        m.encoder_seed = self.encoder_seed;
        m
    }

    /// Every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let o = &self.optimizer;
        let l = &self.loss;
        let kind = match o.kind {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        };
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.epochs.to_string(),
            self.max_steps.to_string(),
            self.batch_size.to_string(),
            kind.to_string(),
            o.lr.to_string(),
            o.beta1.to_string(),
            o.beta2.to_string(),
            o.eps.to_string(),
            o.weight_decay.to_string(),
            o.cosine_decay.to_string(),
            l.temperature.to_string(),
            l.margin.to_string(),
            l.lambda.to_string(),
            l.contrastive.to_string(),
            l.triplet.to_string(),
            l.symmetric_infonce.to_string(),
            self.profile.clone(),
            self.encoder_seed.to_string(),
            self.encoder_weights.clone().unwrap_or_default(),
            self.checkpoint_every.to_string(),
            self.min_gap.to_string(),
            self.val_fraction.to_string(),
            self.split_salt.clone(),
            self.eval_batches.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = TrainConfig::default();
        c.seed = 9;
        c.optimizer.lr = 3e-3;
        c.loss.triplet = false;
        c.encoder_weights = Some("w.bin".into());
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(
            TrainConfig::from_text(&TrainConfig::default().to_text()).unwrap(),
            TrainConfig::default()
        );
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let c = TrainConfig::from_text("# run\n\nseed = 4  # inline\nlr=0.01\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.optimizer.lr, 0.01);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected() {
        assert_eq!(
            TrainConfig::from_text("seed = 1\nlearning_rate = 2\n").unwrap_err(),
            ConfigError::UnknownKey { line: 2, key: "learning_rate".into() }
        );
        assert!(matches!(
            TrainConfig::from_text("seed = 1\nseed = 2").unwrap_err(),
            ConfigError::DuplicateKey { .. }
        ));
        assert!(matches!(
            TrainConfig::from_text("seed = x").unwrap_err(),
            ConfigError::BadValue { .. }
        ));
    }

    #[test]
    fn single_sample_batches_need_triplet_only_mode() {
        assert!(TrainConfig::from_text("batch_size = 1").is_err());
        assert!(TrainConfig::from_text("batch_size = 1\ncontrastive = false").is_ok());
    }

    #[test]
    fn missing_file_says_config_not_found() {
        let err = TrainConfig::load(Path::new("/nonexistent/missing.cfg")).unwrap_err();
        assert!(err.to_string().starts_with("config not found"));
    }
}
