//! Versioned JSON checkpoints of named parameter tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorModel, ModelConfig, ModelError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub model_config: ModelConfig,
    pub params: Vec<NamedTensor>,
    /// Optimizer and loop state, owned by the trainer.
    #[serde(default)]
    pub train_state: Option<serde_json::Value>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> ModelError {
    ModelError::Checkpoint {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &DetectorModel<T>,
        train_state: Option<serde_json::Value>,
    ) -> Self {
        let params = model
            .store
            .params()
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.f64()).collect(),
            })
            .collect();
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: model.cfg.hash(),
            model_config: model.cfg.clone(),
            params,
            train_state,
        }
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let json = serde_json::to_vec(self).map_err(|e| ckpt_err(path, e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json).map_err(|e| ckpt_err(path, e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| ckpt_err(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
        let ck: Checkpoint =
            serde_json::from_slice(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(ckpt_err(
                path,
                format!("unsupported version {}", ck.version),
            ));
        }
        if ck.model_config.hash() != ck.config_hash {
            return Err(ckpt_err(path, "stored config does not match its hash"));
        }
        Ok(ck)
    }

    /// Rebuilds the model. With `expected`, rejects a checkpoint whose
    /// config hash differs from `expected.hash()`.
    pub fn to_model<T: Scalar>(
        &self,
        expected: Option<&ModelConfig>,
    ) -> Result<DetectorModel<T>, ModelError> {
        let bad = |reason: String| ModelError::Checkpoint {
            path: "<memory>".into(),
            reason,
        };
        if let Some(cfg) = expected {
            let want = cfg.hash();
            if want != self.config_hash {
                return Err(bad(format!(
                    "config hash mismatch: checkpoint {} vs expected {want}",
                    self.config_hash
                )));
            }
        }
        let mut model = DetectorModel::<T>::new(self.model_config.clone(), 0)?;
        if model.store.len() != self.params.len() {
            return Err(bad(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for nt in &self.params {
            let id = model
                .store
                .find(&nt.name)
                .ok_or_else(|| bad(format!("unknown parameter {}", nt.name)))?;
            let slot = model.store.value_mut(id);
            if slot.shape() != nt.shape.as_slice() || nt.data.len() != slot.len() {
                return Err(bad(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    nt.name,
                    nt.shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::from_f64(&nt.shape, &nt.data);
        }
        Ok(model)
    }
}
