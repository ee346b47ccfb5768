//! Declarative run descriptions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::SynthConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::{Protocol, TrainConfig};

/// Where the images come from: files or the synthetic generator.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub features: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    /// Images of the synthetic set held out for testing.
    pub synth_test_images: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    pub network: NetworkConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.data.synth {
            if s.grid != self.network.grid || s.visual_dim != self.network.visual_dim {
                return Err(Error::Config(
                    "synthetic data grid/visual_dim differ from the network's".into(),
                ));
            }
        }
        if self.data.features.is_some() != self.data.labels.is_some() {
            return Err(Error::Config("data.features and data.labels go together".into()));
        }
        if self.data.test_features.is_some() != self.data.test_labels.is_some() {
            return Err(Error::Config(
                "data.test_features and data.test_labels go together".into(),
            ));
        }
        Ok(())
    }
}
