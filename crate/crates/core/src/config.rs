//! Run configuration: model shape, training schedule, paths and mode flags.
//!
//! A config file is TOML with one section per module. Keys left out take the
//! profile's defaults; unknown keys are rejected.
//!
//! ```toml
//! profile = "toy"
//! deterministic = true
//!
//! [paths]
//! data_root = "data/synth"
//!
//! [train]
//! seed = 3
//! pretrain_epochs = 5
//!
//! [train.mask]
//! ratio = 0.6
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::MissingnessConfig;
use crate::encoder::EncoderConfig;
use crate::error::{HammError, Result};
use crate::mae::{DecoderConfig, MaskPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Toy,
    Full,
}

impl Profile {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Profile::Toy),
            "full" => Ok(Profile::Full),
            _ => Err(HammError::Config(format!("unknown profile '{s}' (toy|full)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Hidden width of the two-layer classification head.
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            encoder: EncoderConfig::full(),
            decoder: DecoderConfig { width: 256 },
            head_hidden: 512,
        }
    }

    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig::toy(),
            decoder: DecoderConfig { width: 16 },
            head_hidden: 64,
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self::toy(),
            Profile::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder.width == 0 || self.head_hidden == 0 {
            return Err(HammError::Config("decoder width and head width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub batch_pretrain: usize,
    pub batch_finetune: usize,
    pub eval_batch: usize,
    pub pretrain_epochs: usize,
    pub mask: MaskPlan,
    /// Epochs without validation-loss improvement before fine-tuning stops.
    pub early_stop_patience: usize,
    /// Improvement smaller than this does not reset the patience counter.
    pub min_delta: f64,
    pub max_finetune_epochs: usize,
    pub n_seeds: usize,
    pub seed: u64,
    pub missingness: Option<MissingnessConfig>,
    pub augment: bool,
    pub freeze_mcga: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            lr_pretrain: 1e-5,
            lr_finetune: 3e-6,
            batch_pretrain: 8,
            batch_finetune: 16,
            eval_batch: 32,
            pretrain_epochs: 20,
            mask: MaskPlan::default(),
            early_stop_patience: 10,
            min_delta: 1e-6,
            max_finetune_epochs: 200,
            n_seeds: 5,
            seed: 0,
            missingness: None,
            augment: true,
            freeze_mcga: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Schedule for the desk-scale profile: larger steps, short budgets, 8-pixel patches.
    pub fn toy() -> Self {
        Self {
            lr_pretrain: 2e-3,
            lr_finetune: 1e-3,
            eval_batch: 64,
            mask: MaskPlan {
                ratio: 0.7,
                patch_size: 8,
            },
            max_finetune_epochs: 30,
            n_seeds: 3,
            ..Self::full()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Toy => Self::toy(),
            Profile::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr_pretrain, self.lr_finetune, self.beta1, self.beta2, self.eps];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(HammError::Config("learning rates and Adam constants must be positive".into()));
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(HammError::Config("Adam betas must be below 1".into()));
        }
        let counts = [
            self.batch_pretrain,
            self.batch_finetune,
            self.eval_batch,
            self.early_stop_patience,
            self.max_finetune_epochs,
            self.n_seeds,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(HammError::Config(
                "batch sizes, patience, epoch cap and seed count must be at least 1".into(),
            ));
        }
        if !self.min_delta.is_finite() || self.min_delta < 0.0 {
            return Err(HammError::Config("min_delta must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.mask.ratio) || self.mask.patch_size == 0 {
            return Err(HammError::Config(format!("invalid mask plan {:?}", self.mask)));
        }
        if let Some(m) = &self.missingness {
            m.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub data_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub deterministic: bool,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn for_profile(p: Profile) -> Self {
        Self {
            profile: p,
            deterministic: false,
            paths: PathsConfig::default(),
            model: ModelConfig::for_profile(p),
            train: TrainConfig::for_profile(p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.train.mask.validate(self.model.encoder.image_size)
    }

    /// Parses TOML text over the defaults of the profile it names (toy if absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e| HammError::Config(format!("config is not valid TOML: {e}")))?;
        let profile = match user.get("profile") {
            None => Profile::Toy,
            Some(toml::Value::String(s)) => Profile::parse(s)?,
            Some(v) => return Err(HammError::Config(format!("profile must be a string, got {v}"))),
        };
        let mut base = toml::Table::try_from(Self::for_profile(profile))
            .map_err(|e| HammError::Config(format!("serializing defaults: {e}")))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e| HammError::Config(format!("config rejected: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HammError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HammError::Config(format!("serializing config: {e}")))
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
