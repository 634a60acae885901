use std::collections::{BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, InteractionLog};
use crate::model::ItemId;

const MIN_INTERACTIONS: usize = 5;

/// Alternately drops users and items with fewer than five interactions until nothing changes.
pub fn five_core_filter(log: &InteractionLog) -> Result<InteractionLog, DataError> {
    if log.is_empty() {
        return Err(DataError::Empty);
    }
    let mut records = log.records().to_vec();
    loop {
        let before = records.len();
        let mut users: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *users.entry(&r.user).or_default() += 1;
        }
        let drop_users: HashSet<String> =
            users.into_iter().filter(|&(_, c)| c < MIN_INTERACTIONS).map(|(u, _)| u.to_string()).collect();
        records.retain(|r| !drop_users.contains(&r.user));

        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *items.entry(&r.item).or_default() += 1;
        }
        let drop_items: HashSet<String> =
            items.into_iter().filter(|&(_, c)| c < MIN_INTERACTIONS).map(|(i, _)| i.to_string()).collect();
        records.retain(|r| !drop_items.contains(&r.item));

        if records.len() == before {
            break;
        }
    }
    if records.is_empty() {
        return Err(DataError::TooSparse);
    }
    Ok(InteractionLog::from_records(records))
}

/// One user's leave-one-out split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub user: String,
    /// Full chronological history, targets included.
    pub history: Vec<ItemId>,
    /// At most `max_len` items preceding the validation target.
    pub train: Vec<ItemId>,
    pub valid: ItemId,
    pub test: ItemId,
}

impl UserSplit {
    /// Input sequence used to predict the validation target.
    pub fn valid_input(&self) -> &[ItemId] {
        &self.train
    }

    /// Input sequence used to predict the test target: the `max_len` items before it.
    pub fn test_input(&self, max_len: usize) -> &[ItemId] {
        let before = &self.history[..self.history.len() - 1];
        &before[before.len().saturating_sub(max_len)..]
    }
}

/// Vocabulary plus per-user splits. Item ids are `1..=V` in lexicographic order of the
/// original item keys; users are ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub max_len: usize,
    /// `vocabulary[id - 1]` is the original key of item `id`.
    pub vocabulary: Vec<String>,
    pub users: Vec<UserSplit>,
}

impl SplitDataset {
    pub fn num_items(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn item_id(&self, key: &str) -> Option<ItemId> {
        self.vocabulary.binary_search_by(|k| k.as_str().cmp(key)).ok().map(|i| i as ItemId + 1)
    }

    pub fn item_key(&self, id: ItemId) -> Option<&str> {
        self.vocabulary.get((id as usize).checked_sub(1)?).map(String::as_str)
    }

    pub fn user_index(&self, user: &str) -> Option<usize> {
        self.users.binary_search_by(|u| u.user.as_str().cmp(user)).ok()
    }

    pub fn num_interactions(&self) -> usize {
        self.users.iter().map(|u| u.history.len()).sum()
    }
}

/// Leave-one-out split with training sequences truncated to `max_len`.
pub fn split(log: &InteractionLog, max_len: usize) -> Result<SplitDataset, DataError> {
    let vocabulary: Vec<String> =
        log.records().iter().map(|r| r.item.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let ids: HashMap<&str, ItemId> = vocabulary.iter().enumerate().map(|(i, k)| (k.as_str(), i as ItemId + 1)).collect();

    let mut users = Vec::new();
    for (user, items) in log.by_user() {
        if items.len() < 3 {
            return Err(DataError::Bundle(format!("user {user} has {} interactions; at least 3 are needed", items.len())));
        }
        let history: Vec<ItemId> = items.iter().map(|k| ids[k]).collect();
        let n = history.len();
        let before = &history[..n - 2];
        users.push(UserSplit {
            user: user.to_string(),
            train: before[before.len().saturating_sub(max_len)..].to_vec(),
            valid: history[n - 2],
            test: history[n - 1],
            history,
        });
    }
    users.sort_by(|a, b| a.user.cmp(&b.user));
    Ok(SplitDataset { max_len, vocabulary, users })
}

/// Fixed ranking candidates: for each user, the target followed by `count` negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCandidates {
    pub seed: u64,
    pub count: usize,
    pub valid: Vec<Vec<ItemId>>,
    pub test: Vec<Vec<ItemId>>,
}

/// Samples `count` distinct uninteracted items per user, separately for validation and test.
pub fn build_eval_candidates(dataset: &SplitDataset, count: usize, seed: u64) -> Result<EvalCandidates, DataError> {
    let v = dataset.num_items();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut valid = Vec::with_capacity(dataset.users.len());
    let mut test = Vec::with_capacity(dataset.users.len());
    for u in &dataset.users {
        let seen: HashSet<ItemId> = u.history.iter().copied().collect();
        if v < count + seen.len() {
            return Err(DataError::Vocabulary { user: u.user.clone(), needed: count, available: v - seen.len() });
        }
        for (target, out) in [(u.valid, &mut valid), (u.test, &mut test)] {
            let mut list = Vec::with_capacity(count + 1);
            list.push(target);
            let mut taken = HashSet::with_capacity(count);
            while list.len() <= count {
                let item = rng.random_range(1..=v as ItemId);
                if !seen.contains(&item) && taken.insert(item) {
                    list.push(item);
                }
            }
            out.push(list);
        }
    }
    Ok(EvalCandidates { seed, count, valid, test })
}
