use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{decode, encode};
use crate::model::{Model, ModelConfig};
use crate::params::{ModelParams, ParamKind};
use crate::tensor::Tensor;

use super::{AdamState, Result, TrainConfig, TrainError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EEGCKPT1";

const FORMAT_VERSION: u32 = 1;

/// Model, optimizer state and training configuration at the best epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: TrainConfig,
    pub adam: AdamState,
    /// 0-based epoch the parameters come from.
    pub epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    params: Vec<(String, ParamKind)>,
    adam_step: u64,
    epoch: usize,
    best_val_loss: f64,
    seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            train: self.train.clone(),
            params: self.model.params.iter().map(|p| (p.name.clone(), p.kind)).collect(),
            adam_step: self.adam.step,
            epoch: self.epoch,
            best_val_loss: self.best_val_loss,
            seed: self.train.seed,
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (i, p) in self.model.params.iter().enumerate() {
            names.push(p.name.clone());
            tensors.push(p.value.clone());
            if !self.adam.m[i].is_empty() {
                let shape = p.value.shape();
                for (tag, moment) in [("m", &self.adam.m[i]), ("v", &self.adam.v[i])] {
                    names.push(format!("adam.{tag}/{}", p.name));
                    tensors.push(Tensor::from_vec(shape, moment.clone()).expect("finite moments"));
                }
            }
        }
        let arrays: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(&tensors).collect();
        encode(CHECKPOINT_MAGIC, json!(header), &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let (config, arrays) = decode(CHECKPOINT_MAGIC, bytes)?;
        let header: Header = serde_json::from_value(config).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        if header.format_version != FORMAT_VERSION {
            return Err(TrainError::Checkpoint(format!(
                "format version {} is not {FORMAT_VERSION}",
                header.format_version
            )));
        }
        let mut lookup: std::collections::HashMap<String, Tensor> = arrays.into_iter().collect();
        let mut take = |name: &str| {
            lookup
                .remove(name)
                .ok_or_else(|| TrainError::Checkpoint(format!("array {name} missing")))
        };
        let mut params = ModelParams::new();
        let mut adam = AdamState {
            step: header.adam_step,
            ..AdamState::default()
        };
        for (name, kind) in &header.params {
            let value = take(name)?;
            if kind.trainable() {
                adam.m.push(take(&format!("adam.m/{name}"))?.to_vec());
                adam.v.push(take(&format!("adam.v/{name}"))?.to_vec());
            } else {
                adam.m.push(Vec::new());
                adam.v.push(Vec::new());
            }
            params.insert(name, *kind, value);
        }
        if let Some(extra) = lookup.keys().next() {
            return Err(TrainError::Checkpoint(format!("unexpected array {extra}")));
        }
        let model = Model {
            config: header.model,
            params,
        };
        model.check_shapes()?;
        Ok(Checkpoint {
            model,
            train: header.train,
            adam,
            epoch: header.epoch,
            best_val_loss: header.best_val_loss,
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ck.to_bytes()).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
