//! Versioned tensor files: name → shape → row-major f64 values.
//!
//! Values are written as JSON numbers in shortest round-trip form and parsed
//! back exactly, so a save/load cycle is bit-identical for finite values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CgtError, Result};

use super::{ParameterStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "cgt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorFile {
    pub format: String,
    pub version: u32,
    /// Free-form metadata, e.g. the model configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl TensorFile {
    pub fn new(meta: serde_json::Value, tensors: Vec<NamedTensor>) -> Self {
        TensorFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            meta,
            tensors,
        }
    }

    pub fn from_store(meta: serde_json::Value, store: &ParameterStore) -> Result<Self> {
        let tensors = store
            .iter()
            .map(|(name, t)| {
                if !t.is_finite() {
                    return Err(CgtError::Numerical(format!(
                        "parameter {name} has non-finite values"
                    )));
                }
                Ok(NamedTensor {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    data: t.data.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self::new(meta, tensors))
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies every stored tensor into the matching parameter of `store`.
    /// Names and shapes must match exactly in both directions.
    pub fn load_into(&self, store: &mut ParameterStore) -> Result<()> {
        let expected: Vec<_> = store.iter().map(|(n, _)| n.to_string()).collect();
        for name in &expected {
            if self.get(name).is_none() {
                return Err(CgtError::Config(format!("checkpoint lacks parameter {name}")));
            }
        }
        for t in &self.tensors {
            let id = store
                .id(&t.name)
                .ok_or_else(|| CgtError::Config(format!("unknown parameter {} in checkpoint", t.name)))?;
            if store.get(id).shape != t.shape {
                return Err(CgtError::dim(
                    "checkpoint",
                    format!("{}: {:?} vs {:?}", t.name, t.shape, store.get(id).shape),
                ));
            }
            store.assign(id, &t.data)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TensorFile = serde_json::from_str(text)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(CgtError::Config(format!(
                "not a checkpoint file (format {:?})",
                file.format
            )));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(CgtError::Version {
                what: "checkpoint",
                expected: CHECKPOINT_VERSION,
                found: file.version,
            });
        }
        for t in &file.tensors {
            Tensor::new(t.shape.clone(), t.data.clone())?;
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
