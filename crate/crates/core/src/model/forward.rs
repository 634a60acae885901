//! Slice-based evaluation of the score, with per-pattern bookkeeping.
//!
//! Everything that depends only on the history (fused patterns, the
//! pattern-side halves of the KL formulas, δ) is computed once in
//! [`EncodedSequence`]; everything that depends only on the candidate lives
//! in [`TargetTerms`]. A score is then pure arithmetic over the two.

use serde::{Deserialize, Serialize};

use super::{params, Family, ItemId, ModelError, Ptsr, PADDING};
use crate::scalar::Scalar;
use crate::specfn::{self, digamma_unchecked as psi, ln_gamma_unchecked as lgamma};

/// Softmax across rows for every column of `rows × d` logits.
pub(crate) fn column_softmax<T: Scalar>(rows: &[&[T]]) -> Vec<Vec<T>> {
    let d = rows[0].len();
    let mut out = vec![vec![T::zero(); d]; rows.len()];
    for j in 0..d {
        let max = rows.iter().map(|r| r[j]).fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (i, r) in rows.iter().enumerate() {
            let e = (r[j] - max).exp();
            out[i][j] = e;
            total = total + e;
        }
        for o in out.iter_mut() {
            o[j] = o[j] / total;
        }
    }
    out
}

/// δ for one level given the transformed vectors of every position
/// (`None` for padding).
pub(crate) fn bias_for_level<T: Scalar>(model: &Ptsr<T>, vectors: &[Option<Vec<T>>], pad: usize, level: usize) -> Vec<T> {
    let d = model.config.dim;
    let prob = model.config.ablation.use_prob_embedding;
    let mut input = Vec::with_capacity(vectors.len() * d);
    for v in vectors {
        match v {
            None => input.extend(std::iter::repeat_n(T::zero(), d)),
            Some(v) if prob => input.extend((0..d).map(|j| v[j] / (v[j] + v[j + d]))),
            Some(v) => input.extend_from_slice(v),
        }
    }
    let net = &model.params.bias_nets[level - 1];
    let mut hidden = params::affine_apply(&model.params.set, &net.hidden, &input);
    hidden.iter_mut().for_each(|h| *h = h.tanh());
    let logits = params::affine_apply(&model.params.set, &net.output, &hidden);
    let mask: Vec<bool> = (0..logits.len()).map(|k| k >= pad).collect();
    specfn::softmax_masked(&logits, &mask).unwrap_or_else(|| vec![T::zero(); logits.len()])
}

#[derive(Debug, Clone)]
enum SideTerms<T> {
    Gamma { lg_alpha: Vec<T>, ln_beta: Vec<T> },
    Beta { lg_sum: Vec<T>, lg_alpha: Vec<T>, lg_beta: Vec<T> },
    Cosine { mean: Vec<T>, norm: T },
}

#[derive(Debug, Clone)]
pub(crate) struct FusedPattern<T> {
    pub start: usize,
    pub items: Vec<ItemId>,
    /// α ⊕ β (or the plain fused vector).
    pub repr: Vec<T>,
    terms: SideTerms<T>,
}

#[derive(Debug, Clone)]
pub(crate) struct EncodedLevel<T> {
    pub level: usize,
    /// Unmasked windows, ascending by start.
    pub patterns: Vec<FusedPattern<T>>,
    /// δ over all `n − l + 1` windows; masked windows hold 0.
    pub bias: Vec<T>,
}

/// History-side state shared by every candidate.
#[derive(Debug, Clone)]
pub struct EncodedSequence<T> {
    pub padded: Vec<ItemId>,
    /// Number of leading padding positions.
    pub pad: usize,
    pub(crate) levels: Vec<EncodedLevel<T>>,
}

/// Candidate-side state.
#[derive(Debug, Clone)]
pub struct TargetTerms<T> {
    pub item: ItemId,
    repr: Vec<T>,
    kind: TargetKind<T>,
}

#[derive(Debug, Clone)]
enum TargetKind<T> {
    Gamma { psi_alpha: Vec<T>, lg_alpha: Vec<T>, ln_beta: Vec<T>, inv_beta: Vec<T> },
    Beta { constant: T, psi_alpha: Vec<T>, psi_beta: Vec<T>, psi_sum: Vec<T> },
    Cosine { mean: Vec<T>, norm: T },
}

/// One pattern's share of the score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternScore<T> {
    pub level: usize,
    pub start: usize,
    pub items: Vec<ItemId>,
    /// Dis.
    pub distance: T,
    /// η.
    pub weight: T,
    /// δ.
    pub bias: T,
    /// (η + λδ)·(γ − Dis).
    pub contribution: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelScores<T> {
    pub level: usize,
    /// Unmasked patterns only.
    pub patterns: Vec<PatternScore<T>>,
    /// Every window at this level overlapped padding.
    pub fully_masked: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown<T> {
    pub target: ItemId,
    pub levels: Vec<LevelScores<T>>,
    pub total: T,
}

fn mean_of<T: Scalar>(repr: &[T], d: usize, family: Family, prob: bool) -> Vec<T> {
    if !prob {
        return repr.to_vec();
    }
    (0..d)
        .map(|j| {
            let (a, b) = (repr[j], repr[j + d]);
            match family {
                Family::Gamma => a / b,
                Family::Beta => a / (a + b),
            }
        })
        .collect()
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

impl<T: Scalar> Ptsr<T> {
    fn uses_kl(&self) -> bool {
        self.config.ablation.use_prob_embedding && self.config.ablation.use_kl
    }

    fn side_terms(&self, repr: &[T]) -> SideTerms<T> {
        let d = self.config.dim;
        if !self.uses_kl() {
            let mean = mean_of(repr, d, self.config.family, self.config.ablation.use_prob_embedding);
            let norm = norm(&mean);
            return SideTerms::Cosine { mean, norm };
        }
        let (alpha, beta) = repr.split_at(d);
        match self.config.family {
            Family::Gamma => SideTerms::Gamma {
                lg_alpha: alpha.iter().map(|&a| lgamma(a)).collect(),
                ln_beta: beta.iter().map(|&b| b.ln()).collect(),
            },
            Family::Beta => SideTerms::Beta {
                lg_sum: alpha.iter().zip(beta).map(|(&a, &b)| lgamma(a + b)).collect(),
                lg_alpha: alpha.iter().map(|&a| lgamma(a)).collect(),
                lg_beta: beta.iter().map(|&b| lgamma(b)).collect(),
            },
        }
    }

    /// Precomputes everything about `history` that scoring needs.
    pub fn encode(&self, history: &[ItemId]) -> Result<EncodedSequence<T>, ModelError> {
        if history.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if history.contains(&PADDING) {
            return Err(ModelError::UnknownItem(PADDING));
        }
        let n = self.config.max_len;
        let d = self.config.dim;
        let padded = super::pad_sequence(history, n);
        let pad = padded.iter().take_while(|&&i| i == PADDING).count();
        let vectors = padded
            .iter()
            .map(|&item| if item == PADDING { Ok(None) } else { self.item_vector(item).map(Some) })
            .collect::<Result<Vec<_>, _>>()?;

        let logits: Vec<Option<Vec<T>>> = if self.config.levels > 1 {
            vectors.iter().map(|v| v.as_ref().map(|x| self.scorer_logits(x))).collect()
        } else {
            vec![None; n]
        };

        let mut levels = Vec::with_capacity(self.config.levels);
        for level in 1..=self.config.levels {
            let first = pad;
            let last = n - level; // inclusive start
            let mut patterns = Vec::new();
            if first <= last {
                for start in first..=last {
                    let repr = if level == 1 {
                        vectors[start].clone().expect("unmasked position")
                    } else {
                        let window: Vec<&[T]> =
                            (start..start + level).map(|i| logits[i].as_deref().expect("unmasked")).collect();
                        let w = column_softmax(&window);
                        let width = vectors[start].as_ref().expect("unmasked").len();
                        let mut fused = vec![T::zero(); width];
                        for (wi, i) in w.iter().zip(start..start + level) {
                            let v = vectors[i].as_ref().expect("unmasked");
                            for (c, f) in fused.iter_mut().enumerate() {
                                *f = *f + wi[c % d] * v[c];
                            }
                        }
                        fused
                    };
                    let terms = self.side_terms(&repr);
                    patterns.push(FusedPattern { start, items: padded[start..start + level].to_vec(), repr, terms });
                }
            }
            let bias = if self.config.ablation.use_bias {
                bias_for_level(self, &vectors, pad, level)
            } else {
                vec![T::zero(); self.config.windows(level)]
            };
            levels.push(EncodedLevel { level, patterns, bias });
        }
        Ok(EncodedSequence { padded, pad, levels })
    }

    /// Candidate-side terms for `item`.
    pub fn target(&self, item: ItemId) -> Result<TargetTerms<T>, ModelError> {
        let repr = self.item_vector(item)?;
        let d = self.config.dim;
        let kind = if !self.uses_kl() {
            let mean = mean_of(&repr, d, self.config.family, self.config.ablation.use_prob_embedding);
            let norm = norm(&mean);
            TargetKind::Cosine { mean, norm }
        } else {
            let (alpha, beta) = repr.split_at(d);
            match self.config.family {
                Family::Gamma => TargetKind::Gamma {
                    psi_alpha: alpha.iter().map(|&a| psi(a)).collect(),
                    lg_alpha: alpha.iter().map(|&a| lgamma(a)).collect(),
                    ln_beta: beta.iter().map(|&b| b.ln()).collect(),
                    inv_beta: beta.iter().map(|&b| b.recip()).collect(),
                },
                Family::Beta => TargetKind::Beta {
                    constant: alpha
                        .iter()
                        .zip(beta)
                        .map(|(&a, &b)| lgamma(a + b) - lgamma(a) - lgamma(b))
                        .sum(),
                    psi_alpha: alpha.iter().map(|&a| psi(a)).collect(),
                    psi_beta: beta.iter().map(|&b| psi(b)).collect(),
                    psi_sum: alpha.iter().zip(beta).map(|(&a, &b)| psi(a + b)).collect(),
                },
            }
        };
        Ok(TargetTerms { item, repr, kind })
    }

    fn distance(&self, target: &TargetTerms<T>, pattern: &FusedPattern<T>) -> T {
        let d = self.config.dim;
        match (&target.kind, &pattern.terms) {
            (TargetKind::Gamma { psi_alpha, lg_alpha, ln_beta, inv_beta }, SideTerms::Gamma { lg_alpha: lg2, ln_beta: lb2 }) => {
                let mut total = T::zero();
                for j in 0..d {
                    let (a1, a2, b2) = (target.repr[j], pattern.repr[j], pattern.repr[j + d]);
                    total = total + (a1 - a2) * psi_alpha[j] - lg_alpha[j]
                        + lg2[j]
                        + a2 * (ln_beta[j] - lb2[j])
                        + a1 * (b2 * inv_beta[j] - T::one());
                }
                total
            }
            (TargetKind::Beta { constant, psi_alpha, psi_beta, psi_sum }, SideTerms::Beta { lg_sum, lg_alpha, lg_beta }) => {
                let mut total = *constant;
                for j in 0..d {
                    let (a1, b1) = (target.repr[j], target.repr[j + d]);
                    let (a2, b2) = (pattern.repr[j], pattern.repr[j + d]);
                    total = total - lg_sum[j] + lg_alpha[j] + lg_beta[j]
                        + (a1 - a2) * psi_alpha[j]
                        + (b1 - b2) * psi_beta[j]
                        + (a2 - a1 + b2 - b1) * psi_sum[j];
                }
                total
            }
            (TargetKind::Cosine { mean, norm }, SideTerms::Cosine { mean: m2, norm: n2 }) => {
                let dot: T = mean.iter().zip(m2).map(|(&a, &b)| a * b).sum();
                -dot / (*norm * *n2)
            }
            _ => unreachable!("target and pattern terms built under the same configuration"),
        }
    }

    /// Per-pattern decomposition of the score; `total` is their sum.
    pub fn breakdown(&self, encoded: &EncodedSequence<T>, target: &TargetTerms<T>) -> ScoreBreakdown<T> {
        let gamma = T::lit(self.config.gamma);
        let lambda = T::lit(self.config.effective_lambda());
        let mut total = T::zero();
        let mut levels = Vec::with_capacity(encoded.levels.len());
        for lvl in &encoded.levels {
            if lvl.patterns.is_empty() {
                levels.push(LevelScores { level: lvl.level, patterns: Vec::new(), fully_masked: true });
                continue;
            }
            let distances: Vec<T> = lvl.patterns.iter().map(|p| self.distance(target, p)).collect();
            let weights = if self.config.ablation.use_weight {
                let mut neg: Vec<T> = distances.iter().map(|&x| -x).collect();
                specfn::softmax_in_place(&mut neg);
                neg
            } else {
                vec![T::one(); distances.len()]
            };
            let mut level_total = T::zero();
            let patterns = lvl
                .patterns
                .iter()
                .zip(distances.iter().zip(&weights))
                .map(|(p, (&distance, &weight))| {
                    let bias = lvl.bias[p.start];
                    let contribution = (weight + lambda * bias) * (gamma - distance);
                    level_total = level_total + contribution;
                    PatternScore { level: lvl.level, start: p.start, items: p.items.clone(), distance, weight, bias, contribution }
                })
                .collect();
            total = total + level_total;
            levels.push(LevelScores { level: lvl.level, patterns, fully_masked: false });
        }
        ScoreBreakdown { target: target.item, levels, total }
    }

    /// Score only, without per-pattern records.
    pub fn score_encoded(&self, encoded: &EncodedSequence<T>, target: &TargetTerms<T>) -> T {
        let gamma = T::lit(self.config.gamma);
        let lambda = T::lit(self.config.effective_lambda());
        let mut total = T::zero();
        let mut distances = Vec::new();
        for lvl in &encoded.levels {
            if lvl.patterns.is_empty() {
                continue;
            }
            distances.clear();
            distances.extend(lvl.patterns.iter().map(|p| self.distance(target, p)));
            let mut weights: Vec<T> = distances.iter().map(|&x| -x).collect();
            if self.config.ablation.use_weight {
                specfn::softmax_in_place(&mut weights);
            } else {
                weights.iter_mut().for_each(|w| *w = T::one());
            }
            let mut level_total = T::zero();
            for ((p, &distance), &weight) in lvl.patterns.iter().zip(&distances).zip(&weights) {
                level_total = level_total + (weight + lambda * lvl.bias[p.start]) * (gamma - distance);
            }
            total = total + level_total;
        }
        total
    }
}
