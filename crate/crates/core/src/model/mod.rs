//! The pattern-wise transparent scorer.
//!
//! A history of item ids is left-padded to `n` positions and cut into
//! contiguous windows of every size `l = 1..=L`. Each window is fused into a
//! single distribution by a weighted conjunction, compared with the
//! candidate item by KL divergence, and the per-level softmax of negative
//! distances (plus a learned order-sensitive bias) turns the distances into
//! the corrected score
//!
//! ```text
//! ŷ = Σ_l Σ_k (η_k + λ δ_k) · (γ − Dis_k)
//! ```
//!
//! Two evaluators exist: [`Ptsr::breakdown`] works on plain slices and is
//! used for ranking and explanations, [`Ptsr::record_loss`] records the same
//! computation on a [`Tape`](crate::diff::Tape) for training.

mod config;
mod forward;
mod graph;
mod params;

pub use config::{Ablation, Family, ModelConfig};
pub use forward::{EncodedSequence, LevelScores, PatternScore, ScoreBreakdown, TargetTerms};
pub use graph::TapeSequence;
pub use params::{Affine, BiasNet, ModelParams};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::DiffError;
use crate::scalar::Scalar;
use crate::specfn;

/// Dense item id; `0` is the padding token.
pub type ItemId = u32;

pub const PADDING: ItemId = 0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("unknown item id {0}")]
    UnknownItem(ItemId),
    #[error("sequence has no real items")]
    EmptySequence,
    #[error("distribution family mismatch: expected {expected}, found {found}")]
    FamilyMismatch { expected: Family, found: Family },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// `d` independent distributions, one (α, β) pair per dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbEmbedding<T> {
    pub family: Family,
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> ProbEmbedding<T> {
    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// Per-dimension mean of the distributions.
    pub fn mean(&self) -> Vec<T> {
        self.alpha
            .iter()
            .zip(&self.beta)
            .map(|(&a, &b)| match self.family {
                Family::Gamma => a / b,
                Family::Beta => a / (a + b),
            })
            .collect()
    }

    /// `e = α / (α + β)`, the compressed vector fed to the bias network.
    pub fn compressed(&self) -> Vec<T> {
        self.alpha.iter().zip(&self.beta).map(|(&a, &b)| a / (a + b)).collect()
    }
}

/// A contiguous window of a padded sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pattern {
    pub level: usize,
    /// 0-based offset of the first item inside the padded sequence.
    pub start: usize,
    pub items: Vec<ItemId>,
    /// The window overlaps padding and takes no part in scoring.
    pub masked: bool,
}

/// Keeps the most recent `n` items and left-pads with [`PADDING`].
pub fn pad_sequence(history: &[ItemId], n: usize) -> Vec<ItemId> {
    let tail = &history[history.len().saturating_sub(n)..];
    let mut out = vec![PADDING; n - tail.len()];
    out.extend_from_slice(tail);
    out
}

/// All windows of sizes `1..=levels`, grouped by level, in left-to-right order.
pub fn extract_patterns(sequence: &[ItemId], levels: usize) -> Result<Vec<Vec<Pattern>>, ModelError> {
    let n = sequence.len();
    if levels < 1 || levels > n {
        return Err(ModelError::Config(format!("pattern level {levels} invalid for sequence length {n}")));
    }
    Ok((1..=levels)
        .map(|level| {
            sequence
                .windows(level)
                .enumerate()
                .map(|(start, w)| Pattern {
                    level,
                    start,
                    items: w.to_vec(),
                    masked: w.contains(&PADDING),
                })
                .collect()
        })
        .collect())
}

/// Weighted conjunction: `α_p = Σ w_i ⊙ α_i`, `β_p = Σ w_i ⊙ β_i`.
pub fn conjunction<T: Scalar>(items: &[ProbEmbedding<T>], weights: &[Vec<T>]) -> ProbEmbedding<T> {
    let d = items[0].dim();
    let mut alpha = vec![T::zero(); d];
    let mut beta = vec![T::zero(); d];
    for (item, w) in items.iter().zip(weights) {
        for j in 0..d {
            alpha[j] = alpha[j] + w[j] * item.alpha[j];
            beta[j] = beta[j] + w[j] * item.beta[j];
        }
    }
    ProbEmbedding { family: items[0].family, alpha, beta }
}

/// `Σ_j KL(target_j ‖ pattern_j)` in closed form.
pub fn kl_distance<T: Scalar>(
    target: &ProbEmbedding<T>,
    pattern: &ProbEmbedding<T>,
    family: Family,
) -> Result<T, ModelError> {
    for e in [target, pattern] {
        if e.family != family {
            return Err(ModelError::FamilyMismatch { expected: family, found: e.family });
        }
    }
    if target.dim() != pattern.dim() {
        return Err(ModelError::Config(format!("dimension mismatch: {} vs {}", target.dim(), pattern.dim())));
    }
    let check = |x: T| specfn::PositiveReal::new(x).map_err(|e| ModelError::Config(e.to_string()));
    let mut total = T::zero();
    for j in 0..target.dim() {
        let (a1, b1) = (check(target.alpha[j])?, check(target.beta[j])?);
        let (a2, b2) = (check(pattern.alpha[j])?, check(pattern.beta[j])?);
        total = total
            + match family {
                Family::Gamma => gamma_kl(a1, b1, a2, b2),
                Family::Beta => beta_kl(a1, b1, a2, b2),
            };
    }
    Ok(total)
}

/// KL(Gamma(α₁, β₁) ‖ Gamma(α₂, β₂)), shape–rate.
pub fn gamma_kl<T: Scalar>(
    a1: specfn::PositiveReal<T>,
    b1: specfn::PositiveReal<T>,
    a2: specfn::PositiveReal<T>,
    b2: specfn::PositiveReal<T>,
) -> T {
    let (x1, y1, x2, y2) = (a1.get(), b1.get(), a2.get(), b2.get());
    (x1 - x2) * specfn::digamma(a1) - specfn::lgamma(a1)
        + specfn::lgamma(a2)
        + x2 * (y1.ln() - y2.ln())
        + x1 * (y2 - y1) / y1
}

/// KL(Beta(α₁, β₁) ‖ Beta(α₂, β₂)).
pub fn beta_kl<T: Scalar>(
    a1: specfn::PositiveReal<T>,
    b1: specfn::PositiveReal<T>,
    a2: specfn::PositiveReal<T>,
    b2: specfn::PositiveReal<T>,
) -> T {
    let (x1, y1, x2, y2) = (a1.get(), b1.get(), a2.get(), b2.get());
    let s1 = specfn::PositiveReal::new(x1 + y1).expect("sum of positives");
    let s2 = specfn::PositiveReal::new(x2 + y2).expect("sum of positives");
    specfn::lgamma(s1) - specfn::lgamma(a1) - specfn::lgamma(b1) - specfn::lgamma(s2)
        + specfn::lgamma(a2)
        + specfn::lgamma(b2)
        + (x1 - x2) * specfn::digamma(a1)
        + (y1 - y2) * specfn::digamma(b1)
        + (x2 - x1 + y2 - y1) * specfn::digamma(s1)
}

/// η: softmax of negative distances over the unmasked patterns of one level.
/// `None` when every pattern is masked.
pub fn distance_weights<T: Scalar>(distances: &[T], mask: &[bool]) -> Option<Vec<T>> {
    let neg: Vec<T> = distances.iter().map(|&x| -x).collect();
    specfn::softmax_masked(&neg, mask)
}

/// Binary cross-entropy on one positive and one negative score.
pub fn loss<T: Scalar>(score_pos: T, score_neg: T) -> T {
    -specfn::log_sigmoid(score_pos) - specfn::log_sigmoid(-score_neg)
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ptsr<T> {
    pub config: ModelConfig,
    /// Number of real items `V`; valid ids are `1..=V`.
    pub num_items: usize,
    pub params: ModelParams<T>,
}

impl<T: Scalar> Ptsr<T> {
    pub fn new(config: ModelConfig, num_items: usize, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let params = ModelParams::init(&config, num_items, seed);
        Ok(Self { config, num_items, params })
    }

    pub fn from_parts(config: ModelConfig, num_items: usize, params: ModelParams<T>) -> Result<Self, ModelError> {
        config.validate()?;
        if !params.matches(&config) || params.table_rows() != num_items + 1 {
            return Err(ModelError::Config("parameter shapes do not match the configuration".into()));
        }
        Ok(Self { config, num_items, params })
    }

    fn check_item(&self, item: ItemId) -> Result<(), ModelError> {
        if (item as usize) <= self.num_items {
            Ok(())
        } else {
            Err(ModelError::UnknownItem(item))
        }
    }

    /// Transformed table row: `max(softplus(raw), ε)` for (α ⊕ β), or the raw
    /// vector for plain embeddings.
    pub(crate) fn item_vector(&self, item: ItemId) -> Result<Vec<T>, ModelError> {
        self.check_item(item)?;
        let row = self.params.set.get(self.params.item_table).row(item as usize);
        if self.config.ablation.use_prob_embedding {
            let floor = T::lit(self.config.embedding_floor);
            Ok(row.iter().map(|&x| specfn::softplus(x).max(floor)).collect())
        } else {
            Ok(row.to_vec())
        }
    }

    /// Distribution parameters of one item (padding included).
    pub fn lookup_embedding(&self, item: ItemId) -> Result<ProbEmbedding<T>, ModelError> {
        if !self.config.ablation.use_prob_embedding {
            return Err(ModelError::Config("model uses plain embeddings".into()));
        }
        let v = self.item_vector(item)?;
        let d = self.config.dim;
        Ok(ProbEmbedding { family: self.config.family, alpha: v[..d].to_vec(), beta: v[d..].to_vec() })
    }

    /// Attention logits of one item: the scorer applied to α ⊕ β.
    pub(crate) fn scorer_logits(&self, x: &[T]) -> Vec<T> {
        let mut h = x.to_vec();
        for (i, layer) in self.params.scorer.iter().enumerate() {
            if i > 0 {
                h.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = params::affine_apply(&self.params.set, layer, &h);
        }
        h
    }

    /// Per-dimension softmax over a window: `l × d`, every column sums to 1.
    pub fn attention_weights(&self, items: &[ProbEmbedding<T>]) -> Vec<Vec<T>> {
        let logits: Vec<Vec<T>> = items
            .iter()
            .map(|e| {
                let x: Vec<T> = e.alpha.iter().chain(&e.beta).copied().collect();
                self.scorer_logits(&x)
            })
            .collect();
        let refs: Vec<&[T]> = logits.iter().map(Vec::as_slice).collect();
        forward::column_softmax(&refs)
    }

    /// δ for one level of a padded sequence (length `n − l + 1`).
    pub fn sequence_bias(&self, padded: &[ItemId], level: usize) -> Result<Vec<T>, ModelError> {
        if padded.len() != self.config.max_len {
            return Err(ModelError::Config(format!(
                "sequence must be padded to {} items, got {}",
                self.config.max_len,
                padded.len()
            )));
        }
        if level < 1 || level > self.config.levels {
            return Err(ModelError::Config(format!("level {level} outside 1..={}", self.config.levels)));
        }
        let vectors = padded
            .iter()
            .map(|&item| if item == PADDING { Ok(None) } else { self.item_vector(item).map(Some) })
            .collect::<Result<Vec<_>, _>>()?;
        let pad = padded.iter().take_while(|&&i| i == PADDING).count();
        Ok(forward::bias_for_level(self, &vectors, pad, level))
    }

    /// Corrected score of `candidate` given a raw (unpadded) history.
    pub fn score(&self, history: &[ItemId], candidate: ItemId) -> Result<T, ModelError> {
        let encoded = self.encode(history)?;
        let target = self.target(candidate)?;
        Ok(self.breakdown(&encoded, &target).total)
    }

    /// Scores many candidates against one history.
    pub fn score_candidates(&self, history: &[ItemId], candidates: &[ItemId]) -> Result<Vec<T>, ModelError> {
        let encoded = self.encode(history)?;
        candidates
            .iter()
            .map(|&c| Ok(self.breakdown(&encoded, &self.target(c)?).total))
            .collect()
    }
}
