//! The JSON run description shared by every CLI subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterKind, BlockRankPolicy};
use crate::diffusion::{ScheduleConfig, TrainConfig, DEFAULT_REPEATS};
use crate::error::{Error, Result};
use crate::eval::StudyConfig;
use crate::sampler::SamplerConfig;
use crate::unet::UNetConfig;

/// Sizes of the synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub instance_count: usize,
    pub repeats: usize,
    pub reg_count: usize,
    /// Held-out style images used as the style-score reference.
    pub style_reference_count: usize,
    /// Images in the base-model pretraining corpus.
    pub corpus_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            instance_count: 20,
            repeats: DEFAULT_REPEATS,
            reg_count: 50,
            style_reference_count: 16,
            corpus_size: 512,
        }
    }
}

/// An adapter file applied at a given strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterRef {
    pub path: PathBuf,
    #[serde(default = "unit_strength")]
    pub strength: f64,
}

fn unit_strength() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: UNetConfig,
    pub schedule: ScheduleConfig,
    pub pretrain: TrainConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub policy: BlockRankPolicy,
    pub sampler: SamplerConfig,
    pub study: StudyConfig,
    pub adapters: Vec<AdapterRef>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
            pretrain: TrainConfig {
                steps: 2000,
                batch_size: 4,
                caption_dropout: 0.1,
                ..TrainConfig::default()
            },
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
            policy: BlockRankPolicy::full(4, AdapterKind::Locon),
            sampler: SamplerConfig::default(),
            study: StudyConfig::default(),
            adapters: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        ExperimentConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.sampler.validate()?;
        self.policy.validate()?;
        if self.dataset.repeats == 0 {
            return Err(Error::Config("dataset.repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// Applies `seed` to every seeded component.
    pub fn with_seed(mut self, seed: u64) -> ExperimentConfig {
        self.seed = seed;
        self.train.seed = seed;
        self.pretrain.seed = seed;
        self.sampler.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(ExperimentConfig::from_json(r#"{"trian": {}}"#), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_json(r#"{"train": {"stepz": 3}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"policy": {"ranks": {"IN9": 1}, "kind": "locon"}}"#).is_err());
    }

    #[test]
    fn protocol_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg.sampler.steps, 25);
        assert_eq!(cfg.sampler.cfg_scale, 7.0);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.steps, 2000);
        assert_eq!(cfg.dataset.repeats, 25);
        let long = ExperimentConfig::from_json(r#"{"train": {"steps": 11000}}"#).unwrap();
        assert_eq!(long.train.steps, 11000);
        assert_eq!(long.train.batch_size, 2);
    }

    #[test]
    fn seed_reaches_every_component() {
        let cfg = ExperimentConfig::default().with_seed(9);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.pretrain.seed, cfg.sampler.seed), (9, 9, 9, 9));
    }
}
