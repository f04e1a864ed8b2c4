//! Run configuration: a TOML document mirroring the training setup plus
//! dataset paths and the output directory. Every field has a default and
//! unknown keys are rejected. Command-line flags override file values,
//! which override defaults; the digest of the effective config is recorded
//! in all outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::feedback::WeightParameterization;
use crate::model::{AblationMode, ModelConfig};
use crate::preclass::Hyperparams;
use crate::synthgen::{hex_digest, SynthConfig};
use crate::trainer::{default_milestones, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker cap for internal execution. Execution is sequential and
    /// deterministic; results never depend on this value.
    pub threads: usize,
    pub synth: SynthSection,
    pub train: TrainSection,
    pub model: ModelSection,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            synth: SynthSection::default(),
            train: TrainSection::default(),
            model: ModelSection::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub scenes: usize,
    pub blur: usize,
    pub image_size: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::default();
        SynthSection {
            scenes: 100,
            blur: 1,
            image_size: c.image_size,
            classes: c.classes,
            min_objects: c.min_objects,
            max_objects: c.max_objects,
            min_size: c.min_size,
            max_size: c.max_size,
        }
    }
}

impl SynthSection {
    pub fn to_synth_config(&self) -> SynthConfig {
        SynthConfig {
            image_size: self.image_size,
            classes: self.classes,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            min_size: self.min_size,
            max_size: self.max_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Empty means the 2/3 and 11/12 milestones derived from the epoch count.
    pub milestones: Vec<usize>,
    pub proposals_per_gt: usize,
    pub ablation: String,
    pub parameterization: String,
    pub cascade_depth: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 12,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: Vec::new(),
            proposals_per_gt: 2,
            ablation: "cls-img".into(),
            parameterization: "interpolation".into(),
            cascade_depth: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub delta: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub levels: usize,
    pub channels: usize,
    pub classes: usize,
    pub grid: usize,
    pub head_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let h = Hyperparams::default();
        ModelSection {
            delta: h.delta,
            sigma: h.sigma,
            gamma: h.gamma,
            levels: h.levels,
            channels: 64,
            classes: 6,
            grid: 7,
            head_hidden: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub datasets: Vec<String>,
    pub eval_datasets: Vec<String>,
    pub checkpoint: String,
    pub output: String,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FlexError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| FlexError::Config(format!("config parse error: {e}")))
    }

    /// Canonical serialized form; its hash is the config digest.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        hex_digest(self.canonical_toml().as_bytes())
    }

    pub fn to_model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            hyper: Hyperparams {
                delta: self.model.delta,
                sigma: self.model.sigma,
                gamma: self.model.gamma,
                levels: self.model.levels,
            },
            channels: self.model.channels,
            classes: self.model.classes,
            grid: self.model.grid,
            head_hidden: self.model.head_hidden,
            ablation: AblationMode::parse(&self.train.ablation)?,
            parameterization: WeightParameterization::parse(&self.train.parameterization)?,
            cascade_depth: self.train.cascade_depth,
        })
    }

    pub fn to_train_config(&self) -> Result<TrainConfig> {
        let milestones = if self.train.milestones.is_empty() {
            default_milestones(self.train.epochs)
        } else {
            self.train.milestones.clone()
        };
        Ok(TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            weight_decay: self.train.weight_decay,
            milestones,
            seed: self.seed,
            proposals_per_gt: self.train.proposals_per_gt,
            model: self.to_model_config()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.canonical_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.digest(), back.digest());
    }

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::from_toml("unknown_key = 3\n"),
            Err(FlexError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_toml("[train]\nlearning_rage = 0.1\n"),
            Err(FlexError::Config(_))
        ));
    }

    #[test]
    fn partial_overrides_keep_other_defaults() {
        let cfg = RunConfig::from_toml("seed = 9\n[model]\ndelta = 8.0\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.delta, 8.0);
        assert_eq!(cfg.model.sigma, Hyperparams::default().sigma);
        assert_eq!(cfg.train.epochs, 12);
    }

    #[test]
    fn digests_differ_when_content_differs() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn milestones_derive_from_epochs() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 12\n").unwrap();
        assert_eq!(cfg.to_train_config().unwrap().milestones, vec![8, 11]);
        let cfg = RunConfig::from_toml("[train]\nmilestones = [3]\n").unwrap();
        assert_eq!(cfg.to_train_config().unwrap().milestones, vec![3]);
    }
}
