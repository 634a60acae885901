//! Interaction logs, 5-core filtering, leave-one-out splits, evaluation candidates
//! and training batches.

mod batch;
mod bundle;
mod ingest;
mod split;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use batch::{batches, Batch, TargetMode};
pub use bundle::{DatasetBundle, PrepareSettings, BUNDLE_FORMAT_VERSION};
pub use ingest::{ingest, ingest_str, InputFormat};
pub use split::{build_eval_candidates, five_core_filter, split, EvalCandidates, SplitDataset, UserSplit};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("input contains no interactions")]
    Empty,
    #[error("5-core filtering removed every interaction; dataset too sparse")]
    TooSparse,
    #[error("vocabulary of {available} items cannot supply {needed} negatives for user {user}")]
    Vocabulary { user: String, needed: usize, available: usize },
    #[error("invalid format descriptor: {0}")]
    Format(String),
    #[error("bundle format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed bundle: {0}")]
    Bundle(String),
}

/// One observed (user, item, time) event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

/// Deduplicated interactions, grouped by user in first-appearance order and sorted by
/// timestamp within each user (ties keep input order).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    records: Vec<Interaction>,
}

impl InteractionLog {
    /// Builds a log from raw records in input order.
    pub fn from_records(records: Vec<Interaction>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let mut first = std::collections::HashMap::new();
        let mut kept = Vec::with_capacity(records.len());
        for r in records {
            if seen.insert((r.user.clone(), r.item.clone(), r.timestamp)) {
                let next = first.len();
                first.entry(r.user.clone()).or_insert(next);
                kept.push(r);
            }
        }
        kept.sort_by_key(|r| (first[&r.user], r.timestamp));
        Self { records: kept }
    }

    pub fn records(&self) -> &[Interaction] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-user chronological item lists.
    pub fn by_user(&self) -> Vec<(&str, Vec<&str>)> {
        let mut out: Vec<(&str, Vec<&str>)> = Vec::new();
        for r in &self.records {
            match out.last_mut() {
                Some((u, items)) if *u == r.user => items.push(&r.item),
                _ => out.push((&r.user, vec![&r.item])),
            }
        }
        out
    }

    pub fn num_users(&self) -> usize {
        self.by_user().len()
    }

    pub fn num_items(&self) -> usize {
        self.records.iter().map(|r| r.item.as_str()).collect::<std::collections::HashSet<_>>().len()
    }
}
