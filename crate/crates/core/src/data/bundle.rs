use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{build_eval_candidates, five_core_filter, split, DataError, EvalCandidates, InteractionLog, SplitDataset};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

/// Settings that determine a bundle from an interaction log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepareSettings {
    pub max_len: usize,
    pub negatives: usize,
    pub seed: u64,
    /// Source description recorded for provenance, e.g. the input path.
    pub source: String,
}

/// Everything training and evaluation need, in one self-describing file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub format_version: u32,
    pub settings: PrepareSettings,
    pub dataset: SplitDataset,
    pub candidates: EvalCandidates,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl DatasetBundle {
    /// Filter, split and sample candidates.
    pub fn prepare(log: &InteractionLog, settings: PrepareSettings) -> Result<Self, DataError> {
        let filtered = five_core_filter(log)?;
        let dataset = split(&filtered, settings.max_len)?;
        let candidates = build_eval_candidates(&dataset, settings.negatives, settings.seed)?;
        Ok(Self { format_version: BUNDLE_FORMAT_VERSION, settings, dataset, candidates })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("bundle serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let probe: VersionProbe = serde_json::from_str(text).map_err(|e| DataError::Bundle(e.to_string()))?;
        if probe.format_version != BUNDLE_FORMAT_VERSION {
            return Err(DataError::Version { found: probe.format_version, expected: BUNDLE_FORMAT_VERSION });
        }
        serde_json::from_str(text).map_err(|e| DataError::Bundle(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_json()).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    /// SHA-256 of the serialized bundle, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}
