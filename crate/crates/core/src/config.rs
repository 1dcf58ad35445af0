//! The JSON run configuration shared by every pipeline stage.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentPolicy;
use crate::dsp::MfccConfig;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::model::{Architecture, EcapaConfig, ModelConfig, ResNetConfig};
use crate::train::TrainConfig;

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "ADI_CONFIG";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub resnet34: ResNetConfig,
    pub ecapa: EcapaConfig,
}

/// Every section falls back to its defaults when omitted; unknown keys are
/// rejected at any depth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub features: MfccConfig,
    pub augmentation: AugmentPolicy,
    pub architecture: ArchitectureConfig,
    pub training: TrainConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.augmentation.validate()?;
        self.architecture.resnet34.validate()?;
        self.architecture.ecapa.validate()?;
        self.training.validate()?;
        self.inference.validate()
    }

    /// Model configuration for `arch`; input width and class count are set
    /// when training starts.
    pub fn model_config(&self, arch: Architecture) -> ModelConfig {
        match arch {
            Architecture::ResNet34 => ModelConfig::ResNet34(self.architecture.resnet34.clone()),
            Architecture::Ecapa => ModelConfig::Ecapa(self.architecture.ecapa.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn partial_sections_merge_with_defaults() {
        let cfg = RunConfig::from_json(r#"{"training": {"batch_size": 8}, "architecture": {"ecapa": {"channels": 64}}}"#)
            .unwrap();
        assert_eq!(cfg.training.batch_size, 8);
        assert_eq!(cfg.training.epochs_total, 100);
        assert_eq!(cfg.architecture.ecapa.channels, 64);
        assert_eq!(cfg.architecture.ecapa.embed_dim, 192);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"trainng": {}}"#,
            r#"{"training": {"batchsize": 8}}"#,
            r#"{"architecture": {"ecapa": {"chanels": 8}}}"#,
            r#"{"inference": {"normalization": "l2"}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            r#"{"training": {"lr_min": 0.1, "lr_max": 0.01}}"#,
            r#"{"features": {"n_ceps": 200}}"#,
            r#"{"inference": {"fusion_weights": [0.5, 0.25]}}"#,
            r#"{"architecture": {"resnet34": {"stage_depths": [1, 2]}}}"#,
        ] {
            assert!(RunConfig::from_json(doc).is_err(), "{doc}");
        }
    }
}
