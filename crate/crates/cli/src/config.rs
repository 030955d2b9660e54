//! Run configuration loaded from a TOML file.
//!
//! Every field has a default, so an empty file (or no file) is a valid
//! configuration. Unknown keys are rejected with their full key path.

use std::path::{Path, PathBuf};

use glucose_core::evaluation::EvalSetting;
use glucose_core::simulator::SimulationConfig;
use glucose_core::training::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub simulation: SimulationConfig,
    pub training: TrainingConfig,
    /// Noise setting for `simulate`, as `{timestamps}-{observations}`.
    #[serde(with = "setting_label")]
    pub setting: EvalSetting,
    pub output_dir: PathBuf,
    /// When set, overrides both the simulation and training seeds.
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            simulation: SimulationConfig::default(),
            training: TrainingConfig::default(),
            setting: EvalSetting::EXACT,
            output_dir: PathBuf::from("runs"),
            seed: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de =
            toml::de::Deserializer::parse(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::missing(p, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seed = Some(s);
            self.simulation.seed = s;
            self.training.seed = s;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.simulation
            .validate()
            .and_then(|_| self.training.validate())
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

pub(crate) mod setting_label {
    use glucose_core::evaluation::EvalSetting;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: &EvalSetting, ser: S) -> Result<S::Ok, S::Error> {
        ser.serialize_str(s.label())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<EvalSetting, D::Error> {
        let text = String::deserialize(de)?;
        EvalSetting::parse(&text).ok_or_else(|| {
            de::Error::custom(format!(
                "unknown setting `{text}`, expected exact-exact, exact-noisy, noisy-exact or noisy-noisy"
            ))
        })
    }
}
