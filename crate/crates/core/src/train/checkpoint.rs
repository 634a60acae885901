use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochRecord, OptimizerState, TrainConfig};
use crate::model::{ModelConfig, ModelParams};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PTSRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is incompatible (this build reads version {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch; the file is corrupted")]
    Checksum,
    #[error("checkpoint payload: {0}")]
    Payload(String),
}

/// Complete training state. `best` holds the best-validation snapshot seen so far and is
/// `None` inside the snapshot itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub num_items: usize,
    pub params: ModelParams<f64>,
    pub optimizer: OptimizerState<f64>,
    pub train: TrainConfig,
    /// Fingerprint of the dataset bundle trained on.
    pub data_fingerprint: String,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Epochs since the last validation improvement.
    pub stale: usize,
    pub best: Option<Box<Checkpoint>>,
}

impl Checkpoint {
    /// `magic | version (u32 LE) | payload length (u64 LE) | JSON payload | SHA-256(payload)`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("checkpoint serializes");
        let mut out = Vec::with_capacity(HEADER + payload.len() + DIGEST);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&Sha256::digest(&payload));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER {
            if !CHECKPOINT_MAGIC.starts_with(&bytes[..bytes.len().min(8)]) {
                return Err(CheckpointError::BadMagic);
            }
            return Err(CheckpointError::Truncated { expected: HEADER, found: bytes.len() });
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version { found: version, expected: CHECKPOINT_VERSION });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let expected = HEADER.saturating_add(len).saturating_add(DIGEST);
        if bytes.len() != expected {
            return Err(CheckpointError::Truncated { expected, found: bytes.len() });
        }
        let payload = &bytes[HEADER..HEADER + len];
        if Sha256::digest(payload).as_slice() != &bytes[HEADER + len..] {
            return Err(CheckpointError::Checksum);
        }
        serde_json::from_slice(payload).map_err(|e| CheckpointError::Payload(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn model(&self) -> Result<crate::Model, crate::model::ModelError> {
        crate::Model::from_parts(self.model_config.clone(), self.num_items, self.params.clone())
    }

    /// Everything that determines the run: model and training settings plus the dataset.
    pub fn run_config(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model_config,
            "train": self.train,
            "data_fingerprint": self.data_fingerprint,
        })
    }

    /// SHA-256 of `run_config()`, hex encoded.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.run_config().to_string().as_bytes()))
    }

    /// The best-validation snapshot: `best` when present, otherwise this state.
    pub fn best_snapshot(&self) -> Checkpoint {
        match &self.best {
            Some(b) => (**b).clone(),
            None => Checkpoint { best: None, ..self.clone() },
        }
    }
}
