//! Checkpoint container: model parameters, optimizer state, config hash and
//! the RNG state (root seed plus step counter; all streams are derived from
//! those, so the pair is the complete generator state).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SnarmError};
use crate::model::SnarmModel;
use crate::pipeline::config::Config;
use crate::train::Adam;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub config: Config,
    /// Categories the model was trained on.
    pub scope: Vec<String>,
    pub model: SnarmModel,
    pub adam: Adam,
    pub root_seed: u64,
    pub trained_steps: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)
            .map_err(|e| SnarmError::config(format!("serialize checkpoint: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut ckpt: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| SnarmError::data(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(SnarmError::data(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        if ckpt.config_hash != ckpt.config.hash() {
            return Err(SnarmError::config(
                "checkpoint config hash does not match its embedded config",
            ));
        }
        ckpt.model.ensure_grads();
        Ok(ckpt)
    }
}
