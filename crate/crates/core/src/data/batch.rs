use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SplitDataset;
use crate::model::{pad_sequence, ItemId, PADDING};

/// Which training example each user contributes per epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Predict the last training item from the items before it.
    Last,
    /// Predict a uniformly chosen training item from the items before it.
    #[default]
    RandomPrefix,
}

impl std::str::FromStr for TargetMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "last" => Ok(Self::Last),
            "random-prefix" => Ok(Self::RandomPrefix),
            other => Err(format!("unknown target mode `{other}` (expected last or random-prefix)")),
        }
    }
}

/// Left-padded training rows with one positive and one negative each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub max_len: usize,
    /// Index into `SplitDataset::users` per row.
    pub users: Vec<usize>,
    /// `rows × max_len` item ids, left-padded with 0.
    pub items: Vec<ItemId>,
    /// `true` where the position is padding.
    pub mask: Vec<bool>,
    pub positives: Vec<ItemId>,
    pub negatives: Vec<ItemId>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn row(&self, i: usize) -> &[ItemId] {
        &self.items[i * self.max_len..(i + 1) * self.max_len]
    }

    /// The unpadded suffix of row `i`.
    pub fn history(&self, i: usize) -> &[ItemId] {
        let row = self.row(i);
        let pad = self.mask[i * self.max_len..(i + 1) * self.max_len].iter().take_while(|&&m| m).count();
        &row[pad..]
    }
}

/// Batches for one epoch. Order, prefixes and negatives depend only on `(seed, epoch)`.
/// Users whose training sequence is too short to yield an example are skipped.
pub fn batches(dataset: &SplitDataset, batch_size: usize, seed: u64, epoch: u64, mode: TargetMode) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be positive");
    let n = dataset.max_len;
    let v = dataset.num_items() as ItemId;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);

    let mut order: Vec<usize> = (0..dataset.users.len()).filter(|&u| dataset.users[u].train.len() >= 2).collect();
    order.shuffle(&mut rng);

    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = Batch {
                max_len: n,
                users: chunk.to_vec(),
                items: Vec::with_capacity(chunk.len() * n),
                mask: Vec::with_capacity(chunk.len() * n),
                positives: Vec::with_capacity(chunk.len()),
                negatives: Vec::with_capacity(chunk.len()),
            };
            for &u in chunk {
                let user = &dataset.users[u];
                let cut = match mode {
                    TargetMode::Last => user.train.len() - 1,
                    TargetMode::RandomPrefix => rng.random_range(1..user.train.len()),
                };
                let history = &user.train[..cut];
                let padded = pad_sequence(history, n);
                batch.mask.extend(padded.iter().enumerate().map(|(i, _)| i < n.saturating_sub(history.len())));
                debug_assert!(padded.iter().zip(&batch.mask[batch.mask.len() - n..]).all(|(&x, &m)| !m || x == PADDING));
                batch.items.extend(padded);
                batch.positives.push(user.train[cut]);
                let seen: HashSet<ItemId> = user.history.iter().copied().collect();
                let negative = loop {
                    let item = rng.random_range(1..=v);
                    if !seen.contains(&item) {
                        break item;
                    }
                };
                batch.negatives.push(negative);
            }
            batch
        })
        .collect()
}
