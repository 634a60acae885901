use serde::{Deserialize, Serialize};

use super::ModelError;

/// Distribution family backing each embedding dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Gamma in shape–rate form: density ∝ x^(α−1) e^(−βx).
    Gamma,
    Beta,
}

impl std::str::FromStr for Family {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gamma" | "g" => Ok(Family::Gamma),
            "beta" | "b" => Ok(Family::Beta),
            other => Err(ModelError::Config(format!("unknown distribution family `{other}`"))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Gamma => "gamma",
            Family::Beta => "beta",
        })
    }
}

/// Switches for the ablation variants. All `true` is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Ablation {
    /// Distance-based weight η; when off every unmasked pattern gets weight 1.
    pub use_weight: bool,
    /// Sequence-aware bias δ; when off λ is treated as 0.
    pub use_bias: bool,
    /// KL distance; when off the distance is the negated cosine similarity
    /// of the distributions' mean vectors.
    pub use_kl: bool,
    /// Probabilistic embeddings; when off items are plain vectors fused by a
    /// weighted sum and compared by cosine similarity.
    pub use_prob_embedding: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { use_weight: true, use_bias: true, use_kl: true, use_prob_embedding: true }
    }
}

impl Ablation {
    /// Variant label in the usual ablation-table style.
    pub fn label(&self) -> String {
        let mut off = Vec::new();
        if !self.use_weight {
            off.push("W");
        }
        if !self.use_bias {
            off.push("B");
        }
        if !self.use_kl {
            off.push("KL");
        }
        if !self.use_prob_embedding {
            off.push("PE");
        }
        if off.is_empty() {
            "default".to_string()
        } else {
            format!("w/o {}", off.join("+"))
        }
    }

    /// Whether every score is a KL-based, η-normalised corrected score, for
    /// which `ŷ ≤ L·γ·(1+λ)` holds.
    pub fn is_bounded(&self) -> bool {
        self.use_weight && self.use_kl && self.use_prob_embedding
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension d (number of distributions per item).
    pub dim: usize,
    /// Maximum pattern level L.
    pub levels: usize,
    /// Maximum sequence length n.
    pub max_len: usize,
    /// Margin γ.
    pub gamma: f64,
    /// Bias strength λ.
    pub lambda: f64,
    pub family: Family,
    pub ablation: Ablation,
    /// Number of affine layers in the per-item attention scorer.
    pub scorer_depth: usize,
    /// Lower bound ε applied to every distribution parameter.
    pub embedding_floor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            levels: 2,
            max_len: 20,
            gamma: 2.0,
            lambda: 0.4,
            family: Family::Gamma,
            ablation: Ablation::default(),
            scorer_depth: 1,
            embedding_floor: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.dim < 1 {
            return bad("dim must be at least 1".into());
        }
        if self.max_len < 1 {
            return bad("max_len must be at least 1".into());
        }
        if self.levels < 1 || self.levels > self.max_len {
            return bad(format!("levels must lie in 1..={} (max_len), got {}", self.max_len, self.levels));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.scorer_depth < 1 {
            return bad("scorer_depth must be at least 1".into());
        }
        if !(self.embedding_floor > 0.0 && self.embedding_floor.is_finite()) {
            return bad(format!("embedding_floor must be positive, got {}", self.embedding_floor));
        }
        Ok(())
    }

    /// λ as seen by the score: zero when the bias is ablated.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.use_bias {
            self.lambda
        } else {
            0.0
        }
    }

    /// Width of one item-table row: (α, β) or a plain vector.
    pub fn row_width(&self) -> usize {
        if self.ablation.use_prob_embedding {
            2 * self.dim
        } else {
            self.dim
        }
    }

    /// Number of windows at `level`.
    pub fn windows(&self, level: usize) -> usize {
        self.max_len + 1 - level
    }

    /// Total number of patterns Σ_l (n − l + 1).
    pub fn total_patterns(&self) -> usize {
        (1..=self.levels).map(|l| self.windows(l)).sum()
    }

    /// Upper bound on the score of the full model.
    pub fn score_bound(&self) -> f64 {
        self.levels as f64 * self.gamma * (1.0 + self.effective_lambda())
    }
}
