//! Checkpoint files: every named parameter tensor plus optimiser, config and RNG state.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use decamp_core::numerics::{AdamW, ParamStore, RngSnapshot, Tensor};
use decamp_core::train::{StageKind, TrainConfig};

use crate::error::{Error, Result};
use crate::files::{read_json, write_json, Provenance};

pub const CHECKPOINT_FORMAT: &str = "decamp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub stage: StageKind,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimiser steps.
    pub step: u64,
    pub config: TrainConfig,
    /// Epoch-shuffling generator state.
    pub rng: RngSnapshot,
    pub provenance: Option<Provenance>,
    pub params: Vec<NamedTensor>,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn params_from(store: &ParamStore) -> Vec<NamedTensor> {
        store
            .iter()
            .map(|(_, p)| NamedTensor { name: p.name.clone(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() })
            .collect()
    }

    /// The stored parameters as a standalone store, in file order.
    pub fn store(&self) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for p in &self.params {
            if store.find(&p.name).is_some() {
                return Err(Error::Checkpoint { path: PathBuf::new(), detail: format!("duplicate parameter `{}`", p.name) });
            }
            store.add(p.name.clone(), Tensor::new(p.shape.clone(), p.data.clone())?);
        }
        Ok(store)
    }

    /// Overwrites every parameter of `target` with the stored value of the same name.
    pub fn load_into(&self, target: &mut ParamStore) -> Result<()> {
        if self.params.len() != target.len() {
            return Err(Error::Checkpoint {
                path: PathBuf::new(),
                detail: format!("{} stored parameters, model has {}", self.params.len(), target.len()),
            });
        }
        for p in &self.params {
            target.set_value(&p.name, Tensor::new(p.shape.clone(), p.data.clone())?).map_err(|e| {
                Error::Checkpoint { path: PathBuf::new(), detail: format!("parameter `{}`: {e}", p.name) }
            })?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Loads a checkpoint file, or the newest checkpoint of a run directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { latest_in(path)? } else { path.to_path_buf() };
        let ck: Checkpoint = read_json(&file)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                path: file,
                detail: format!("unsupported format {} v{}", ck.format, ck.version),
            });
        }
        Ok(ck)
    }
}

/// Newest `epoch_*.json` under `dir` or `dir/checkpoints`.
pub fn latest_in(dir: &Path) -> Result<PathBuf> {
    let sub = dir.join("checkpoints");
    let dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".json")))
        .collect();
    files.sort();
    files.pop().ok_or_else(|| Error::Checkpoint { path: dir, detail: "no checkpoint files found".into() })
}
