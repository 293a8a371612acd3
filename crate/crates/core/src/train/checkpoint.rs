//! Checkpoint archive.
//!
//! A checkpoint is one safetensors file. Tensors are keyed by parameter path
//! (`encoder.fundus.stem.weight`, `head.fc1.bias`, ...); Adam moments, when
//! present, are stored as `adam.m.<path>` and `adam.v.<path>`. The header
//! metadata holds:
//!
//! | key            | value                                        |
//! |----------------|----------------------------------------------|
//! | `format`       | `hamm-checkpoint-1`                          |
//! | `kind`         | `pretrain` or `finetune`                     |
//! | `epoch`        | completed epochs                             |
//! | `adam_step`    | optimizer step count (when moments stored)   |
//! | `model_config` | TOML of the model configuration              |
//! | `train_config` | TOML of the training configuration           |
//! | `losses`       | comma-separated per-epoch losses             |

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::SafeTensors;

use super::adam::AdamState;
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{HammError, Result};

pub const FORMAT: &str = "hamm-checkpoint-1";
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Pretrain,
    Finetune,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Pretrain => "pretrain",
            CheckpointKind::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub epoch: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Option<AdamState>,
    pub losses: Vec<f64>,
}

fn ckpt_err(path: &Path, why: impl std::fmt::Display) -> HammError {
    HammError::Checkpoint(format!("{}: {why}", path.display()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        if let Some(adam) = &self.adam {
            tensors.extend(adam.m.iter().map(|(k, v)| (format!("{ADAM_M}{k}"), v)));
            tensors.extend(adam.v.iter().map(|(k, v)| (format!("{ADAM_V}{k}"), v)));
        }
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("kind".to_string(), self.kind.as_str().to_string());
        meta.insert("epoch".to_string(), self.epoch.to_string());
        if let Some(adam) = &self.adam {
            meta.insert("adam_step".to_string(), adam.step.to_string());
        }
        let model = toml::to_string(&self.model).map_err(|e| HammError::Checkpoint(e.to_string()))?;
        let train = toml::to_string(&self.train).map_err(|e| HammError::Checkpoint(e.to_string()))?;
        meta.insert("model_config".to_string(), model);
        meta.insert("train_config".to_string(), train);
        let losses: Vec<String> = self.losses.iter().map(|l| format!("{l:?}")).collect();
        meta.insert("losses".to_string(), losses.join(","));
        safetensors::serialize(tensors, Some(meta)).map_err(|e| HammError::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| HammError::io(dir, e))?;
        }
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| HammError::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| ckpt_err(origin, e))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| ckpt_err(origin, "missing metadata"))?;
        let get = |k: &str| meta.get(k).ok_or_else(|| ckpt_err(origin, format!("missing '{k}'")));
        if get("format")? != FORMAT {
            return Err(ckpt_err(origin, format!("unsupported format '{}'", get("format")?)));
        }
        let kind = match get("kind")?.as_str() {
            "pretrain" => CheckpointKind::Pretrain,
            "finetune" => CheckpointKind::Finetune,
            other => return Err(ckpt_err(origin, format!("unknown kind '{other}'"))),
        };
        let epoch = get("epoch")?.parse().map_err(|e| ckpt_err(origin, e))?;
        let model: ModelConfig = toml::from_str(get("model_config")?).map_err(|e| ckpt_err(origin, e))?;
        let train: TrainConfig = toml::from_str(get("train_config")?).map_err(|e| ckpt_err(origin, e))?;
        let losses = match get("losses")?.as_str() {
            "" => Vec::new(),
            s => s
                .split(',')
                .map(|x| x.parse::<f64>().map_err(|e| ckpt_err(origin, e)))
                .collect::<Result<_>>()?,
        };
        let tensors = candle_core::safetensors::load_buffer(bytes, &Device::Cpu)?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(ADAM_M) {
                m.insert(name.to_string(), t);
            } else if let Some(name) = k.strip_prefix(ADAM_V) {
                v.insert(name.to_string(), t);
            } else {
                params.insert(k, t);
            }
        }
        let adam = match meta.get("adam_step") {
            Some(step) => Some(AdamState {
                step: step.parse().map_err(|e| ckpt_err(origin, e))?,
                m,
                v,
            }),
            None => None,
        };
        Ok(Self {
            kind,
            epoch,
            model,
            train,
            params,
            adam,
            losses,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| HammError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Parameters under `prefix.` with the prefix kept.
    pub fn params_with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}
