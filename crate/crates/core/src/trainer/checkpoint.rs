//! Versioned JSON checkpoints. Serialization is byte-stable given
//! identical state: struct field order is fixed, collections are vectors,
//! and floats print shortest-roundtrip.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memvp::MemVpState;
use crate::trainer::optimizer::AdamW;
use crate::trainer::train::{MemVpSetup, TrainConfig};
use crate::transformer::config::ModelConfig;
use crate::transformer::weights::ModelWeights;

pub const CHECKPOINT_VERSION: u32 = 1;

/// The model bundle: configuration, weights by layer and name, and the
/// seed they were initialized from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub rng_seed: u64,
}

/// Full training checkpoint: model bundle, visual-prompting state,
/// optimizer moments, epoch counter, and the exact RNG state, so resuming
/// reproduces the identical next step bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelBundle,
    pub memvp: MemVpState,
    pub setup: MemVpSetup,
    pub train_config: TrainConfig,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub rng: ChaCha8Rng,
    pub best_val_acc: f64,
    pub best_epoch: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        ckpt.model.config.validate()?;
        ckpt.model.weights.validate(&ckpt.model.config)?;
        Ok(ckpt)
    }
}
