//! The score and loss recorded on a tape for training.

use super::{Affine, Family, ItemId, ModelError, Ptsr, PADDING};
use crate::diff::{NodeId, Tape};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
enum PatternNodes {
    Gamma { alpha: NodeId, beta: NodeId, lg_alpha: NodeId, ln_beta: NodeId },
    Beta { alpha: NodeId, beta: NodeId, sum: NodeId, lg_rest: NodeId },
    Cosine { mean: NodeId, norm: NodeId },
}

#[derive(Debug, Clone)]
struct LevelNodes {
    patterns: Vec<PatternNodes>,
    /// λ·δ restricted to the unmasked windows, when the bias is active.
    scaled_bias: Option<NodeId>,
}

/// History-side nodes shared by every candidate scored on the same tape.
#[derive(Debug, Clone)]
pub struct TapeSequence {
    levels: Vec<LevelNodes>,
}

enum TargetNodes {
    Gamma { alpha: NodeId, beta: NodeId, psi_alpha: NodeId, lg_alpha: NodeId, ln_beta: NodeId },
    Beta { alpha: NodeId, beta: NodeId, sum: NodeId, constant: NodeId, psi_alpha: NodeId, psi_beta: NodeId, psi_sum: NodeId },
    Cosine { mean: NodeId, norm: NodeId },
}

impl<T: Scalar> Ptsr<T> {
    fn record_affine(&self, tape: &mut Tape<T>, layer: &Affine, x: NodeId) -> Result<NodeId, ModelError> {
        let w = tape.param(&self.params.set, layer.weight);
        let b = tape.param(&self.params.set, layer.bias);
        let y = tape.matvec(w, x, layer.out, layer.inp)?;
        Ok(tape.add(y, b)?)
    }

    /// Transformed row of `item` as a tape node.
    fn record_item(&self, tape: &mut Tape<T>, item: ItemId) -> Result<NodeId, ModelError> {
        if item as usize > self.num_items {
            return Err(ModelError::UnknownItem(item));
        }
        let raw = tape.param_row(&self.params.set, self.params.item_table, item as usize)?;
        if self.config.ablation.use_prob_embedding {
            let sp = tape.softplus(raw)?;
            Ok(tape.floor(sp, T::lit(self.config.embedding_floor))?)
        } else {
            Ok(raw)
        }
    }

    fn uses_kl_graph(&self) -> bool {
        self.config.ablation.use_prob_embedding && self.config.ablation.use_kl
    }

    fn record_mean(&self, tape: &mut Tape<T>, repr: NodeId) -> Result<(NodeId, NodeId), ModelError> {
        let d = self.config.dim;
        let mean = if self.config.ablation.use_prob_embedding {
            let alpha = tape.slice(repr, 0, d)?;
            let beta = tape.slice(repr, d, d)?;
            match self.config.family {
                Family::Gamma => tape.div(alpha, beta)?,
                Family::Beta => {
                    let s = tape.add(alpha, beta)?;
                    tape.div(alpha, s)?
                }
            }
        } else {
            repr
        };
        let sq = tape.dot(mean, mean)?;
        let norm = tape.sqrt(sq)?;
        Ok((mean, norm))
    }

    fn record_pattern(&self, tape: &mut Tape<T>, repr: NodeId) -> Result<PatternNodes, ModelError> {
        if !self.uses_kl_graph() {
            let (mean, norm) = self.record_mean(tape, repr)?;
            return Ok(PatternNodes::Cosine { mean, norm });
        }
        let d = self.config.dim;
        let alpha = tape.slice(repr, 0, d)?;
        let beta = tape.slice(repr, d, d)?;
        Ok(match self.config.family {
            Family::Gamma => {
                let lg_alpha = tape.lgamma(alpha)?;
                let ln_beta = tape.log(beta)?;
                PatternNodes::Gamma { alpha, beta, lg_alpha, ln_beta }
            }
            Family::Beta => {
                // lnΓ(α₂) + lnΓ(β₂) − lnΓ(α₂ + β₂)
                let sum = tape.add(alpha, beta)?;
                let la = tape.lgamma(alpha)?;
                let lb = tape.lgamma(beta)?;
                let ls = tape.lgamma(sum)?;
                let lab = tape.add(la, lb)?;
                let lg_rest = tape.sub(lab, ls)?;
                PatternNodes::Beta { alpha, beta, sum, lg_rest }
            }
        })
    }

    /// Records everything that depends only on the history.
    pub fn record_sequence(&self, tape: &mut Tape<T>, history: &[ItemId]) -> Result<TapeSequence, ModelError> {
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

        let mut reprs = vec![None; n];
        for i in pad..n {
            reprs[i] = Some(self.record_item(tape, padded[i])?);
        }
        let mut logits = vec![None; n];
        if self.config.levels > 1 {
            for i in pad..n {
                let mut h = reprs[i].expect("unmasked");
                for (k, layer) in self.params.scorer.iter().enumerate() {
                    if k > 0 {
                        h = tape.tanh(h)?;
                    }
                    h = self.record_affine(tape, layer, h)?;
                }
                logits[i] = Some(h);
            }
        }

        let lambda = self.config.effective_lambda();
        let bias_input = if lambda > 0.0 {
            let zeros = tape.constant(vec![T::zero(); d]);
            let mut parts = Vec::with_capacity(n);
            for r in &reprs {
                parts.push(match r {
                    None => zeros,
                    Some(r) if self.config.ablation.use_prob_embedding => {
                        let alpha = tape.slice(*r, 0, d)?;
                        let beta = tape.slice(*r, d, d)?;
                        let s = tape.add(alpha, beta)?;
                        tape.div(alpha, s)?
                    }
                    Some(r) => *r,
                });
            }
            Some(tape.concat(&parts)?)
        } else {
            None
        };

        let width = self.config.row_width();
        let mut levels = Vec::with_capacity(self.config.levels);
        for level in 1..=self.config.levels {
            let m = self.config.windows(level);
            let mut patterns = Vec::new();
            if pad + level <= n {
                for start in pad..=n - level {
                    let repr = if level == 1 {
                        reprs[start].expect("unmasked")
                    } else {
                        let window = start..start + level;
                        let s: Vec<NodeId> = window.clone().map(|i| logits[i].expect("unmasked")).collect();
                        let s = tape.concat(&s)?;
                        let w = tape.softmax_columns(s, level, d)?;
                        // Each weight row covers both α and β halves.
                        let w = if width == 2 * d {
                            let rows: Vec<NodeId> =
                                (0..level).map(|r| tape.slice(w, r * d, d)).collect::<Result<_, _>>()?;
                            let doubled: Vec<NodeId> = rows.iter().flat_map(|&r| [r, r]).collect();
                            tape.concat(&doubled)?
                        } else {
                            w
                        };
                        let v: Vec<NodeId> = window.map(|i| reprs[i].expect("unmasked")).collect();
                        let v = tape.concat(&v)?;
                        let weighted = tape.mul(w, v)?;
                        tape.sum_rows(weighted, level, width)?
                    };
                    patterns.push(self.record_pattern(tape, repr)?);
                }
            }
            let scaled_bias = match bias_input {
                Some(input) if !patterns.is_empty() => {
                    let net = self.params.bias_nets[level - 1];
                    let h = self.record_affine(tape, &net.hidden, input)?;
                    let h = tape.tanh(h)?;
                    let logits = self.record_affine(tape, &net.output, h)?;
                    let mask: Vec<bool> = (0..m).map(|k| k >= pad).collect();
                    let delta = tape.softmax_masked(logits, &mask)?;
                    let delta = tape.slice(delta, pad, m - pad)?;
                    let lam = tape.constant_scalar(T::lit(lambda));
                    Some(tape.mul(delta, lam)?)
                }
                _ => None,
            };
            levels.push(LevelNodes { patterns, scaled_bias });
        }
        Ok(TapeSequence { levels })
    }

    fn record_target(&self, tape: &mut Tape<T>, item: ItemId) -> Result<TargetNodes, ModelError> {
        let repr = self.record_item(tape, item)?;
        if !self.uses_kl_graph() {
            let (mean, norm) = self.record_mean(tape, repr)?;
            return Ok(TargetNodes::Cosine { mean, norm });
        }
        let d = self.config.dim;
        let alpha = tape.slice(repr, 0, d)?;
        let beta = tape.slice(repr, d, d)?;
        Ok(match self.config.family {
            Family::Gamma => {
                let psi_alpha = tape.digamma(alpha)?;
                let lg_alpha = tape.lgamma(alpha)?;
                let ln_beta = tape.log(beta)?;
                TargetNodes::Gamma { alpha, beta, psi_alpha, lg_alpha, ln_beta }
            }
            Family::Beta => {
                let sum = tape.add(alpha, beta)?;
                let ls = tape.lgamma(sum)?;
                let la = tape.lgamma(alpha)?;
                let lb = tape.lgamma(beta)?;
                let c = tape.sub(ls, la)?;
                let c = tape.sub(c, lb)?;
                let constant = tape.sum(c)?;
                let psi_alpha = tape.digamma(alpha)?;
                let psi_beta = tape.digamma(beta)?;
                let psi_sum = tape.digamma(sum)?;
                TargetNodes::Beta { alpha, beta, sum, constant, psi_alpha, psi_beta, psi_sum }
            }
        })
    }

    fn record_distance(&self, tape: &mut Tape<T>, target: &TargetNodes, pattern: &PatternNodes) -> Result<NodeId, ModelError> {
        Ok(match (target, pattern) {
            (
                TargetNodes::Gamma { alpha: a1, beta: b1, psi_alpha, lg_alpha, ln_beta },
                PatternNodes::Gamma { alpha: a2, beta: b2, lg_alpha: lg2, ln_beta: lb2 },
            ) => {
                let da = tape.sub(*a1, *a2)?;
                let t1 = tape.mul(da, *psi_alpha)?;
                let t2 = tape.sub(*lg2, *lg_alpha)?;
                let dl = tape.sub(*ln_beta, *lb2)?;
                let t3 = tape.mul(*a2, dl)?;
                let ratio = tape.div(*b2, *b1)?;
                let one = tape.constant_scalar(T::one());
                let ratio = tape.sub(ratio, one)?;
                let t4 = tape.mul(*a1, ratio)?;
                let s = tape.add(t1, t2)?;
                let s = tape.add(s, t3)?;
                let s = tape.add(s, t4)?;
                tape.sum(s)?
            }
            (
                TargetNodes::Beta { alpha: a1, beta: b1, sum: s1, constant, psi_alpha, psi_beta, psi_sum },
                PatternNodes::Beta { alpha: a2, beta: b2, sum: s2, lg_rest },
            ) => {
                let da = tape.sub(*a1, *a2)?;
                let t1 = tape.mul(da, *psi_alpha)?;
                let db = tape.sub(*b1, *b2)?;
                let t2 = tape.mul(db, *psi_beta)?;
                let ds = tape.sub(*s2, *s1)?;
                let t3 = tape.mul(ds, *psi_sum)?;
                let s = tape.add(*lg_rest, t1)?;
                let s = tape.add(s, t2)?;
                let s = tape.add(s, t3)?;
                let s = tape.sum(s)?;
                tape.add(s, *constant)?
            }
            (TargetNodes::Cosine { mean: m1, norm: n1 }, PatternNodes::Cosine { mean: m2, norm: n2 }) => {
                let dot = tape.dot(*m1, *m2)?;
                let denom = tape.mul(*n1, *n2)?;
                let cos = tape.div(dot, denom)?;
                tape.neg(cos)?
            }
            _ => unreachable!("target and pattern nodes built under the same configuration"),
        })
    }

    /// Records ŷ for `candidate` against an already recorded history.
    pub fn record_score(&self, tape: &mut Tape<T>, seq: &TapeSequence, candidate: ItemId) -> Result<NodeId, ModelError> {
        let target = self.record_target(tape, candidate)?;
        let gamma = tape.constant_scalar(T::lit(self.config.gamma));
        let mut total: Option<NodeId> = None;
        for lvl in &seq.levels {
            if lvl.patterns.is_empty() {
                continue;
            }
            let dists =
                lvl.patterns.iter().map(|p| self.record_distance(tape, &target, p)).collect::<Result<Vec<_>, _>>()?;
            let dist = tape.concat(&dists)?;
            let weight = if self.config.ablation.use_weight {
                let neg = tape.neg(dist)?;
                tape.softmax(neg)?
            } else {
                tape.constant(vec![T::one(); dists.len()])
            };
            let correction = match lvl.scaled_bias {
                Some(b) => tape.add(weight, b)?,
                None => weight,
            };
            let margin = tape.sub(gamma, dist)?;
            let level_score = tape.dot(correction, margin)?;
            total = Some(match total {
                Some(t) => tape.add(t, level_score)?,
                None => level_score,
            });
        }
        total.ok_or(ModelError::EmptySequence)
    }

    /// Records `−ln σ(ŷ₊) − ln σ(−ŷ₋)` for one training example.
    pub fn record_loss(
        &self,
        tape: &mut Tape<T>,
        history: &[ItemId],
        positive: ItemId,
        negative: ItemId,
    ) -> Result<NodeId, ModelError> {
        let seq = self.record_sequence(tape, history)?;
        let pos = self.record_score(tape, &seq, positive)?;
        let neg = self.record_score(tape, &seq, negative)?;
        let lp = tape.log_sigmoid(pos)?;
        let nn = tape.neg(neg)?;
        let ln = tape.log_sigmoid(nn)?;
        let total = tape.add(lp, ln)?;
        Ok(tape.neg(total)?)
    }
}
