//! The JSON run configuration shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::UNetConfig;
use crate::optim::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the checkpoint path with a `.history.csv` suffix.
    pub history_csv: Option<PathBuf>,
}

/// Every knob of a run. Missing keys take their defaults and unknown keys
/// are rejected, so the serialized form is the complete effective config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: UNetConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: UNetConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            n_train: 38,
            n_test: 32,
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.num_classes)?;
        self.synth.validate()?;
        if self.synth.classes() != self.model.num_classes {
            return Err(Error::Config(format!(
                "synth taxonomy has {} classes, model expects {}",
                self.synth.classes(),
                self.model.num_classes
            )));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be at least 1".into()));
        }
        Ok(())
    }

    pub fn history_path(&self, checkpoint: &Path) -> PathBuf {
        self.paths.history_csv.clone().unwrap_or_else(|| {
            let mut s = checkpoint.as_os_str().to_owned();
            s.push(".history.csv");
            PathBuf::from(s)
        })
    }
}
