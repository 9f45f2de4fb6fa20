//! Run configuration shared by the command-line verbs.
//!
//! Values come from the built-in defaults, then an optional TOML file, then
//! command-line flags, each layer overriding the previous one. Every section
//! is optional in the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{DrorConfig, LiorConfig};
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::neighbors::EncoderConfig;
use crate::nn::NetworkConfig;
use crate::sim::{SensorSpec, SnowConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub sensor: SensorSpec,
    pub snow: SnowConfig,
    pub encoder: EncoderConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub dror: DrorConfig,
    pub lior: LiorConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        self.snow.validate()?;
        self.encoder.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        self.dror.validate()?;
        self.lior.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.train.epochs = 3;
        c.encoder.cutoff = 4.5;
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[train]\nepochs = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(c.encoder, EncoderConfig::default());
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        assert!(matches!(RunConfig::from_toml("[train]\nepoch = 2\n"), Err(Error::Config(_))));
    }
}
