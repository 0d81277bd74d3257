use std::path::Path;

use femnet::data::{SplitName, SyntheticSpec};
use femnet::dynamics::{ModelConfig, Variant};
use femnet::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelFlags {
    pub variant: Variant,
    /// Defaults to the variant's width.
    pub hidden_width: Option<usize>,
    pub hidden_layers: usize,
    pub autonomous: bool,
    pub stationary: bool,
    pub time_period: Option<f64>,
}

impl Default for ModelFlags {
    fn default() -> Self {
        let base = ModelConfig::new(Variant::Tfen, 1);
        Self {
            variant: Variant::Tfen,
            hidden_width: None,
            hidden_layers: base.hidden_layers,
            autonomous: base.autonomous,
            stationary: base.stationary,
            time_period: None,
        }
    }
}

impl ModelFlags {
    pub fn model_config(&self, m: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            m,
            hidden_width: self.hidden_width.unwrap_or_else(|| self.variant.default_hidden_width()),
            hidden_layers: self.hidden_layers,
            autonomous: self.autonomous,
            stationary: self.stationary,
            time_period: self.time_period,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFlags {
    pub horizon: usize,
    pub split: SplitName,
}

impl Default for EvalFlags {
    fn default() -> Self {
        Self { horizon: 10, split: SplitName::Test }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshFlags {
    /// Degrees; no filtering when absent.
    pub sliver_threshold_deg: Option<f64>,
}

impl Default for MeshFlags {
    fn default() -> Self {
        Self { sliver_threshold_deg: Some(10.0) }
    }
}

/// Everything a command may read; the seed overrides every nested seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<SyntheticSpec>,
    pub normalize: Option<bool>,
    pub mesh: MeshFlags,
    pub model: ModelFlags,
    pub train: TrainConfig,
    pub eval: EvalFlags,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> Result<Self, CliError> {
        let mut config = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
            }
        };
        if let Some(s) = seed {
            config.seed = s;
        }
        config.sync_seeds();
        Ok(config)
    }

    pub fn sync_seeds(&mut self) {
        self.train.seed = self.seed;
        if let Some(d) = self.data.as_mut() {
            d.seed = self.seed;
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stamp(&self) -> serde_json::Value {
        serde_json::json!({ "config_hash": self.hash(), "seed": self.seed })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        b.sync_seeds();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn partial_config_uses_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"model": {"variant": "fen"}}"#).unwrap();
        assert_eq!(c.model.model_config(1).hidden_width, 128);
        assert_eq!(c.train.horizon, 10);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
