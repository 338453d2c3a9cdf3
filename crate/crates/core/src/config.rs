//! The run document: one TOML file covering data, model, training,
//! evaluation and probing, plus the root seed.
//!
//! ```
//! use stpt::config::RunConfig;
//!
//! let cfg = RunConfig::from_toml("seed = 7\n[model]\nvariant = \"pse\"\n").unwrap();
//! assert_eq!(cfg.seed, 7);
//! assert_eq!(cfg.model.token_vocab_size, cfg.data.token_vocab_size());
//! // Normalizing is idempotent.
//! let again = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
//! assert_eq!(again, cfg);
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::ProbeConfig;
use crate::data::{DataConfig, FrameLayout};
use crate::error::{Error, Result};
use crate::eval::DecodeConfig;
use crate::model::ModelConfig;
use crate::seeds;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; data generation, initialization and training each use a
    /// sub-seed derived from it.
    pub seed: u64,
    /// Directory of the generated corpus.
    pub data_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: DecodeConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: DecodeConfig::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and normalizes a document. Unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::parse(text)?.normalize()
    }

    /// Parses without normalizing, so callers can apply overrides first.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fills derived fields and checks cross-field constraints. The model's
    /// input width and vocabulary sizes always follow the data section.
    pub fn normalize(mut self) -> Result<Self> {
        self.data.validate()?;
        self.model.input_dim = self.data.feature_dim;
        self.model.phoneme_vocab_size = self.data.phoneme_vocab_size();
        self.model.token_vocab_size = self.data.token_vocab_size();
        self.model.validate()?;
        self.train.seed = self.train_seed();
        self.train.validate()?;
        let ctx = self.model.context_len(self.data.max_frames)?;
        if ctx > self.model.max_positions {
            return Err(Error::config(
                "model.max_positions",
                format!("{} is below the {ctx} context frames of a {}-frame utterance", self.model.max_positions, self.data.max_frames),
            ));
        }
        if self.eval.max_len == 0 || self.eval.max_len >= self.model.max_positions {
            return Err(Error::config("eval.max_len", "must be positive and below model.max_positions"));
        }
        if self.probe.n_batches == 0 || self.probe.batch_size == 0 {
            return Err(Error::config("probe", "n_batches and batch_size must be positive"));
        }
        Ok(self)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        toml::Table::try_from(self).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn layout(&self) -> FrameLayout {
        FrameLayout {
            downsample: self.model.downsample_factor(),
            receptive_field: self.model.receptive_field(),
        }
    }

    pub fn data_seed(&self) -> u64 {
        seeds::derive(self.seed, "data", &[])
    }

    pub fn init_seed(&self) -> u64 {
        seeds::derive(self.seed, "init", &[])
    }

    pub fn train_seed(&self) -> u64 {
        seeds::derive(self.seed, "train", &[])
    }

    pub fn probe_seed(&self) -> u64 {
        seeds::derive(self.seed, "probe", &[])
    }
}
