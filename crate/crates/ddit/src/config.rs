//! Run configuration: a single JSON document with exactly five key groups
//! (`model`, `diversity`, `train`, `sample`, `data`). Unknown keys anywhere
//! are errors, and every field has a default, so `{}` is a valid config.

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::losses::DiversityConfig;
use crate::model::ModelConfig;
use crate::sampler::SampleConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// JSON `model` section; geometry fields (token count, class count) are
/// derived from the `data` section, not spelled here.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub use_long_residual: bool,
    pub mlp_ratio: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        // desk-scale defaults: every acceptance check finishes in minutes
        ModelSection {
            num_blocks: 6,
            hidden_dim: 64,
            num_heads: 4,
            patch_size: 2,
            use_long_residual: true,
            mlp_ratio: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub diversity: DiversityConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DatasetSpec,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Resolved architecture (also revalidates the model section against the
    /// data mode).
    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::resolve(&self.model, &self.data)
    }

    /// Schema and cross-field checks.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let model = self.model_config()?;
        self.diversity.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        if self.train.alignment && self.train.align_depth >= model.num_blocks {
            return Err(Error::Config(format!(
                "train.align_depth {} must be < num_blocks {}",
                self.train.align_depth, model.num_blocks
            )));
        }
        if let Some(c) = self.sample.class_id {
            if c >= model.num_classes {
                return Err(Error::Config(format!(
                    "sample.class_id {c} out of range for {} classes",
                    model.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_a_valid_config() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg.model.num_blocks, 6);
        assert_eq!(cfg.model.hidden_dim, 64);
        assert_eq!(cfg.train.learning_rate, 1e-4);
        assert_eq!(cfg.train.beta1, 0.9);
        assert_eq!(cfg.train.beta2, 0.999);
        assert_eq!(cfg.train.weight_decay, 0.0);
        assert_eq!(cfg.train.lambda_align, 0.5);
        assert_eq!(cfg.sample.num_steps, 250);
        assert_eq!(cfg.sample.cfg_scale, 1.0);
        assert_eq!(cfg.diversity.lambda_orth, 0.33);
        assert_eq!(cfg.diversity.adaptive_lo, 0.1);
        assert_eq!(cfg.diversity.adaptive_hi, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"modell": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"blocks": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
    }

    #[test]
    fn cross_field_checks() {
        // odd block count with long residuals
        let err = RunConfig::from_json(r#"{"model": {"num_blocks": 5}}"#);
        assert!(err.is_err());
        // fine without the residuals
        assert!(RunConfig::from_json(
            r#"{"model": {"num_blocks": 5, "use_long_residual": false}}"#
        )
        .is_ok());
        // alignment depth out of range
        let err = RunConfig::from_json(
            r#"{"train": {"alignment": true, "align_depth": 6}}"#,
        );
        assert!(err.is_err());
        // head divisibility
        assert!(RunConfig::from_json(r#"{"model": {"hidden_dim": 62}}"#).is_err());
    }

    #[test]
    fn config_roundtrips_identically() {
        let cfg = RunConfig::from_json(r#"{"train": {"seed": 7, "batch_size": 32}}"#).unwrap();
        let s1 = serde_json::to_string(&cfg).unwrap();
        let back = RunConfig::from_json(&s1).unwrap();
        let s2 = serde_json::to_string(&back).unwrap();
        assert_eq!(s1, s2, "serialization must be stable for bitwise checkpoints");
    }
}
