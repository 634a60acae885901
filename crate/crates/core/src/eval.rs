//! Ranking metrics under the sampled-candidate protocol, per-pattern explanations and
//! key-item recall.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetBundle;
use crate::model::{ItemId, LevelScores, ModelError, TargetTerms};
use crate::Model;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("ground truth {target} appears {count} times among the candidates")]
    Protocol { target: ItemId, count: usize },
    #[error("cutoff K must be at least 1")]
    BadCutoff,
    #[error("no results to summarize")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("relations line {line}: {message}")]
    Relations { line: usize, message: String },
}

/// Ranked candidates for one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub user: usize,
    pub target: ItemId,
    pub candidates: Vec<ItemId>,
    pub scores: Vec<f64>,
    /// 1-based rank of the target.
    pub rank: usize,
}

/// 1-based rank of `target` when sorting by score descending, ties by id ascending.
pub fn rank_of(candidates: &[ItemId], scores: &[f64], target: ItemId) -> Result<usize, EvalError> {
    let hits: Vec<usize> = (0..candidates.len()).filter(|&i| candidates[i] == target).collect();
    if hits.len() != 1 {
        return Err(EvalError::Protocol { target, count: hits.len() });
    }
    let t = scores[hits[0]];
    let ahead = candidates
        .iter()
        .zip(scores)
        .filter(|&(&c, &s)| s > t || (s == t && c < target))
        .count();
    Ok(ahead + 1)
}

pub fn rank_candidates(
    model: &Model,
    user: usize,
    history: &[ItemId],
    candidates: &[ItemId],
    target: ItemId,
) -> Result<RankResult, EvalError> {
    let scores = model.score_candidates(history, candidates)?;
    let rank = rank_of(candidates, &scores, target)?;
    Ok(RankResult { user, target, candidates: candidates.to_vec(), scores, rank })
}

/// HR@K and NDCG@K averaged over users.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
}

pub fn metrics_from_ranks(ranks: &[usize], k: usize) -> Result<MetricsAtK, EvalError> {
    if k < 1 {
        return Err(EvalError::BadCutoff);
    }
    if ranks.is_empty() {
        return Err(EvalError::Empty);
    }
    let (mut hr, mut ndcg) = (0.0, 0.0);
    for &r in ranks {
        if r <= k {
            hr += 1.0;
            ndcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    let n = ranks.len() as f64;
    Ok(MetricsAtK { k, hr: hr / n, ndcg: ndcg / n })
}

pub fn metrics(results: &[RankResult], k: usize) -> Result<MetricsAtK, EvalError> {
    let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
    metrics_from_ranks(&ranks, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

/// Target ranks for every user on the bundle's fixed candidate lists.
/// Candidate-side terms are computed once per item and shared across users.
pub fn rank_split(model: &Model, bundle: &DatasetBundle, split: Split) -> Result<Vec<usize>, EvalError> {
    let targets: Vec<TargetTerms<f64>> =
        (1..=model.num_items as ItemId).into_par_iter().map(|i| model.target(i)).collect::<Result<_, _>>()?;
    let ds = &bundle.dataset;
    let lists = match split {
        Split::Valid => &bundle.candidates.valid,
        Split::Test => &bundle.candidates.test,
    };
    ds.users
        .par_iter()
        .zip(lists.par_iter())
        .map(|(u, cands)| {
            let (history, target) = match split {
                Split::Valid => (u.valid_input(), u.valid),
                Split::Test => (u.test_input(ds.max_len), u.test),
            };
            let enc = model.encode(history)?;
            let scores: Vec<f64> = cands.iter().map(|&c| model.score_encoded(&enc, &targets[c as usize - 1])).collect();
            rank_of(cands, &scores, target)
        })
        .collect()
}

/// How sequence items are credited from pattern contributions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImportanceMode {
    /// Sum over every pattern containing the item.
    #[default]
    Aggregated,
    /// Single-item patterns only.
    PointLevel,
}

impl std::str::FromStr for ImportanceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aggregated" => Ok(Self::Aggregated),
            "point-level" => Ok(Self::PointLevel),
            other => Err(format!("unknown importance mode `{other}` (expected aggregated or point-level)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemImportance {
    pub item: ItemId,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub target: ItemId,
    pub score: f64,
    /// Pattern starts index the padded sequence.
    pub levels: Vec<LevelScores<f64>>,
    /// Distinct sequence items, most important first (ties by id ascending).
    pub items: Vec<ItemImportance>,
    pub mode: ImportanceMode,
}

pub fn explain(model: &Model, history: &[ItemId], target: ItemId, mode: ImportanceMode) -> Result<Explanation, EvalError> {
    let enc = model.encode(history)?;
    let b = model.breakdown(&enc, &model.target(target)?);
    let mut importance: BTreeMap<ItemId, f64> = enc.padded[enc.pad..].iter().map(|&i| (i, 0.0)).collect();
    for lvl in &b.levels {
        if mode == ImportanceMode::PointLevel && lvl.level != 1 {
            continue;
        }
        for p in &lvl.patterns {
            let distinct: HashSet<ItemId> = p.items.iter().copied().collect();
            for i in distinct {
                *importance.get_mut(&i).expect("pattern items come from the sequence") += p.contribution;
            }
        }
    }
    let mut items: Vec<ItemImportance> = importance.into_iter().map(|(item, importance)| ItemImportance { item, importance }).collect();
    items.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.item.cmp(&b.item)));
    Ok(Explanation { target, score: b.total, levels: b.levels, items, mode })
}

/// One line of a relation file, resolved to dense ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub user: usize,
    pub target: ItemId,
    pub related: ItemId,
    pub kind: String,
}

/// Parses `user, target, related, relation` rows (tab or comma, with header). Rows naming
/// unknown users or items are dropped; the count is returned alongside.
pub fn parse_relations(text: &str, bundle: &DatasetBundle) -> Result<(Vec<Relation>, usize), EvalError> {
    let ds = &bundle.dataset;
    let header = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let delimiter = if header.contains('\t') { b'\t' } else { b',' };
    let mut reader =
        csv::ReaderBuilder::new().delimiter(delimiter).flexible(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    let mut unknown = 0;
    for row in reader.records() {
        let row = row.map_err(|e| EvalError::Relations {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if row.len() < 4 || row.iter().take(4).any(str::is_empty) {
            return Err(EvalError::Relations { line, message: "expected user, target, related, relation".into() });
        }
        match (ds.user_index(&row[0]), ds.item_id(&row[1]), ds.item_id(&row[2])) {
            (Some(user), Some(target), Some(related)) => out.push(Relation { user, target, related, kind: row[3].to_string() }),
            _ => unknown += 1,
        }
    }
    Ok((out, unknown))
}

pub fn load_relations(path: &Path, bundle: &DatasetBundle) -> Result<(Vec<Relation>, usize), EvalError> {
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_relations(&text, bundle)
}

/// |top-K ∩ related| / min(K, |related|).
pub fn recall_at_k(ranked: &[ItemId], related: &HashSet<ItemId>, k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|i| related.contains(i)).count();
    hits as f64 / k.min(related.len()) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationRecall {
    pub relation: String,
    pub k: usize,
    pub recall: f64,
    pub pairs: usize,
    /// Pairs skipped because no related item occurs in the sequence or the target is
    /// neither of the user's held-out items.
    pub skipped: usize,
}

/// Sequence and target used to explain a (user, target) pair: the test input when the
/// target is the user's test item, the validation input when it is the validation item.
pub fn pair_history(bundle: &DatasetBundle, user: usize, target: ItemId) -> Option<&[ItemId]> {
    let u = &bundle.dataset.users[user];
    if target == u.test {
        Some(u.test_input(bundle.dataset.max_len))
    } else if target == u.valid {
        Some(u.valid_input())
    } else {
        None
    }
}

/// Groups relations by (type, user, target) in a fixed order.
pub fn group_relations(relations: &[Relation]) -> BTreeMap<(String, usize, ItemId), HashSet<ItemId>> {
    let mut groups: BTreeMap<(String, usize, ItemId), HashSet<ItemId>> = BTreeMap::new();
    for r in relations {
        groups.entry((r.kind.clone(), r.user, r.target)).or_default().insert(r.related);
    }
    groups
}

/// Recall@K of related items under the model's item-importance ranking, per relation type.
pub fn key_item_recall(
    model: &Model,
    bundle: &DatasetBundle,
    relations: &[Relation],
    k: usize,
    mode: ImportanceMode,
) -> Result<Vec<RelationRecall>, EvalError> {
    key_item_recall_with(bundle, relations, k, |history, target| {
        Ok(explain(model, history, target, mode)?.items.into_iter().map(|x| x.item).collect())
    })
}

/// Recall@K with an arbitrary ranking of a sequence's distinct items.
pub fn key_item_recall_with<F>(
    bundle: &DatasetBundle,
    relations: &[Relation],
    k: usize,
    mut rank_items: F,
) -> Result<Vec<RelationRecall>, EvalError>
where
    F: FnMut(&[ItemId], ItemId) -> Result<Vec<ItemId>, EvalError>,
{
    if k < 1 {
        return Err(EvalError::BadCutoff);
    }
    let mut per_kind: BTreeMap<String, (f64, usize, usize)> = BTreeMap::new();
    for ((kind, user, target), related) in group_relations(relations) {
        let slot = per_kind.entry(kind).or_default();
        let Some(history) = pair_history(bundle, user, target) else {
            slot.2 += 1;
            continue;
        };
        let present: HashSet<ItemId> = history.iter().copied().filter(|i| related.contains(i)).collect();
        if present.is_empty() {
            slot.2 += 1;
            continue;
        }
        let ranked = rank_items(history, target)?;
        slot.0 += recall_at_k(&ranked, &present, k);
        slot.1 += 1;
    }
    Ok(per_kind
        .into_iter()
        .map(|(relation, (sum, pairs, skipped))| RelationRecall {
            relation,
            k,
            recall: if pairs > 0 { sum / pairs as f64 } else { 0.0 },
            pairs,
            skipped,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranks_and_ties() {
        assert_eq!(rank_of(&[4, 2, 9], &[0.1, 0.5, 0.2], 2).unwrap(), 1);
        assert_eq!(rank_of(&[4, 2, 9], &[0.1, 0.5, 0.2], 4).unwrap(), 3);
        // equal scores: ascending id decides
        assert_eq!(rank_of(&[4, 2, 9], &[1.0; 3], 2).unwrap(), 1);
        assert_eq!(rank_of(&[4, 2, 9], &[1.0; 3], 9).unwrap(), 3);
        assert!(matches!(rank_of(&[4, 2], &[1.0; 2], 7), Err(EvalError::Protocol { count: 0, .. })));
        assert!(matches!(rank_of(&[4, 4], &[1.0; 2], 4), Err(EvalError::Protocol { count: 2, .. })));
    }

    #[test]
    fn shift_leaves_ranks_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let cands: Vec<ItemId> = (1..=30).collect();
            let scores: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + 17.0).collect();
            let t = rng.random_range(1..=30);
            assert_eq!(rank_of(&cands, &scores, t).unwrap(), rank_of(&cands, &shifted, t).unwrap());
        }
    }

    #[test]
    fn metric_examples() {
        let m = metrics_from_ranks(&[1], 10).unwrap();
        assert_eq!((m.hr, m.ndcg), (1.0, 1.0));
        let m = metrics_from_ranks(&[3], 5).unwrap();
        assert!((m.ndcg - 0.5).abs() < 1e-15);
        let m = metrics_from_ranks(&[11], 10).unwrap();
        assert_eq!((m.hr, m.ndcg), (0.0, 0.0));
        assert!(matches!(metrics_from_ranks(&[1], 0), Err(EvalError::BadCutoff)));
        assert!(matches!(metrics_from_ranks(&[], 5), Err(EvalError::Empty)));
    }

    #[test]
    fn metrics_bounded_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ranks: Vec<usize> = (0..500).map(|_| rng.random_range(1..=101)).collect();
        let mut prev = (0.0, 0.0);
        for k in 1..=101 {
            let m = metrics_from_ranks(&ranks, k).unwrap();
            assert!((0.0..=1.0).contains(&m.hr) && (0.0..=1.0).contains(&m.ndcg));
            assert!(m.hr >= prev.0 && m.ndcg >= prev.1);
            prev = (m.hr, m.ndcg);
        }
        assert_eq!(prev.0, 1.0);
    }

    fn model(levels: usize) -> Model {
        let config = ModelConfig { dim: 4, max_len: 8, levels, ..Default::default() };
        let mut m = Model::new(config, 20, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in m.params.set.ids().collect::<Vec<_>>() {
            for x in m.params.set.get_mut(id).data.iter_mut() {
                *x = rng.random_range(-1.0..1.0);
            }
        }
        m
    }

    #[test]
    fn explanation_sums_to_score() {
        let m = model(3);
        let e = explain(&m, &[3, 8, 1, 8, 5], 7, ImportanceMode::Aggregated).unwrap();
        let total: f64 = e.levels.iter().flat_map(|l| &l.patterns).map(|p| p.contribution).sum();
        assert!((total - m.score(&[3, 8, 1, 8, 5], 7).unwrap()).abs() < 1e-9);
        assert!((e.score - total).abs() < 1e-12);
    }

    #[test]
    fn single_level_importance_is_own_pattern() {
        let m = model(1);
        let h = [3, 8, 1, 4, 5];
        let e = explain(&m, &h, 7, ImportanceMode::Aggregated).unwrap();
        for it in &e.items {
            let own = e.levels[0].patterns.iter().find(|p| p.items == [it.item]).unwrap().contribution;
            assert_eq!(it.importance, own);
        }
    }

    #[test]
    fn level_two_windows_accumulate() {
        let m = model(2);
        let h = [3, 8, 1, 4, 5];
        let agg = explain(&m, &h, 7, ImportanceMode::Aggregated).unwrap();
        let point = explain(&m, &h, 7, ImportanceMode::PointLevel).unwrap();
        // Item 1 sits in the middle: windows (8,1) and (1,4).
        let l2: f64 = agg.levels[1].patterns.iter().filter(|p| p.items.contains(&1)).map(|p| p.contribution).sum();
        assert_eq!(agg.levels[1].patterns.iter().filter(|p| p.items.contains(&1)).count(), 2);
        let get = |e: &Explanation| e.items.iter().find(|x| x.item == 1).unwrap().importance;
        assert!((get(&agg) - get(&point) - l2).abs() < 1e-12);

        let m3 = model(3);
        let e3 = explain(&m3, &h, 7, ImportanceMode::Aggregated).unwrap();
        // With L = 3 the middle item is in three level-3 windows.
        assert_eq!(e3.levels[2].patterns.iter().filter(|p| p.items.contains(&1)).count(), 3);
    }

    #[test]
    fn recall_examples() {
        let related: HashSet<ItemId> = [5, 6].into_iter().collect();
        assert_eq!(recall_at_k(&[5, 6, 1, 2], &related, 2), 1.0);
        assert_eq!(recall_at_k(&[5, 1, 6, 2], &related, 1), 1.0);
        assert_eq!(recall_at_k(&[1, 5, 6, 2], &related, 1), 0.0);
        assert_eq!(recall_at_k(&[1, 2, 6, 5], &related, 10), 1.0);
        assert_eq!(recall_at_k(&[1, 5, 2, 6], &related, 3), 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 20000;
        let mut sum = 0.0;
        for _ in 0..trials {
            let mut items: Vec<ItemId> = (1..=20).collect();
            items.shuffle(&mut rng);
            sum += recall_at_k(&items, &[7].into_iter().collect(), 1);
        }
        assert!((sum / trials as f64 - 0.05).abs() < 0.006);
    }
}
