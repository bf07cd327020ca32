//! Run configuration: one JSON file, every field defaulted, unknown keys
//! rejected. Command-line flags are applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rtgen_core::featurizer::ModelConfig;
use rtgen_core::synthdata::GenConfig;
use rtgen_core::train::TrainConfig;

use crate::error::{CliError, CliResult};

/// Dataset sizes and the first scene seed of each split. Scene `i` of a
/// split uses seed `start + i`, so splits are disjoint when the ranges are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub val_samples: usize,
    pub train_seed: u64,
    pub val_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_samples: 2000, val_samples: 200, train_seed: 0, val_seed: 1_000_000 }
    }
}

impl DataConfig {
    pub fn train_seeds(&self) -> std::ops::Range<u64> {
        self.train_seed..self.train_seed + self.train_samples as u64
    }

    pub fn val_seeds(&self) -> std::ops::Range<u64> {
        self.val_seed..self.val_seed + self.val_samples as u64
    }

    pub fn validate(&self) -> CliResult<()> {
        let (t, v) = (self.train_seeds(), self.val_seeds());
        if self.train_samples > 0 && self.val_samples > 0 && t.start < v.end && v.start < t.end {
            return Err(CliError::Config(format!("train seeds {t:?} overlap val seeds {v:?}")));
        }
        Ok(())
    }
}

/// Where datasets and run outputs live.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Dataset root holding `train/` and `val/`.
    pub data_dir: PathBuf,
    /// Output directory for checkpoints, metrics and reports.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: PathBuf::from("data"), out_dir: PathBuf::from("runs/default") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(rename = "gen")]
    pub gen_cfg: GenConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Reads a config file; `None` gives the defaults.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.gen_cfg.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.gen_cfg.image_size != self.model.image_size {
            return Err(CliError::Config(format!(
                "generator image size {} differs from model image size {}",
                self.gen_cfg.image_size, self.model.image_size
            )));
        }
        let vocab = self.gen_cfg.vocabulary()?;
        check_vocab(&self.model, vocab.len(), self.gen_cfg.max_name_len())
    }
}

/// A model fits a dataset when its vocabulary size matches and every name
/// plus the end marker fits in its text tokens.
pub fn check_vocab(model: &ModelConfig, vocab_len: usize, max_name_len: usize) -> CliResult<()> {
    if model.vocab != vocab_len {
        return Err(CliError::Config(format!("model vocab {} but dataset vocabulary has {vocab_len} entries", model.vocab)));
    }
    if max_name_len + 1 > model.text_tokens {
        return Err(CliError::Config(format!(
            "names of {max_name_len} tokens need at least {} text tokens, model has {}",
            max_name_len + 1,
            model.text_tokens
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_losslessly() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn empty_object_gives_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        let c: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lr, TrainConfig::default().lr);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"modle": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"depth": 3}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"loss": {"cls": 1.0}}}"#).is_err());
    }

    #[test]
    fn overlapping_splits_are_a_config_error() {
        let mut c = RunConfig::default();
        c.data.val_seed = 100;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn vocabulary_and_text_tokens_are_checked() {
        let mut c = RunConfig::default();
        c.model.vocab = 11;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.text_tokens = 3;
        assert!(c.validate().is_err());
        c.model.text_tokens = 4;
        c.validate().unwrap();
    }
}
