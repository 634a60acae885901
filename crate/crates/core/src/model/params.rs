use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::diff::{ParamId, ParamSet};
use crate::scalar::Scalar;

/// `y = W x + b` with `W` of shape `out × inp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inp: usize,
    pub out: usize,
}

/// Per-level bias network: affine (n·d → d), tanh, affine (d → n − l + 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasNet {
    pub level: usize,
    pub hidden: Affine,
    pub output: Affine,
}

/// Trainable state of a model plus the layout that locates each tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub set: ParamSet<T>,
    /// `(V + 1) × row_width`; row 0 is the padding token.
    pub item_table: ParamId,
    /// Attention scorer shared by every item, window and level.
    pub scorer: Vec<Affine>,
    /// One network per level, index `l − 1`.
    pub bias_nets: Vec<BiasNet>,
}

const EMBEDDING_MEAN: f64 = 0.5;
const INIT_STD: f64 = 0.02;

impl<T: Scalar> ModelParams<T> {
    /// Fresh parameters for `num_items` real items (ids `1..=num_items`).
    pub fn init(config: &ModelConfig, num_items: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = ParamSet::new();
        let d = config.dim;
        let n = config.max_len;
        let width = config.row_width();

        let embed_mean = if config.ablation.use_prob_embedding { EMBEDDING_MEAN } else { 0.0 };
        let embed = Normal::new(embed_mean, INIT_STD).expect("valid normal");
        let weight = Normal::new(0.0, INIT_STD).expect("valid normal");
        let mut sample = |count: usize, dist: &Normal<f64>| -> Vec<T> {
            (0..count).map(|_| T::lit(dist.sample(&mut rng))).collect()
        };

        let item_table = set.push("item_table", num_items + 1, width, sample((num_items + 1) * width, &embed));

        let mut scorer = Vec::with_capacity(config.scorer_depth);
        let mut inp = width;
        for layer in 0..config.scorer_depth {
            let w = set.push(format!("scorer.{layer}.weight"), d, inp, sample(d * inp, &weight));
            let b = set.push(format!("scorer.{layer}.bias"), 1, d, vec![T::zero(); d]);
            scorer.push(Affine { weight: w, bias: b, inp, out: d });
            inp = d;
        }

        let mut bias_nets = Vec::with_capacity(config.levels);
        for level in 1..=config.levels {
            let m = config.windows(level);
            let w1 = set.push(format!("bias.{level}.hidden.weight"), d, n * d, sample(d * n * d, &weight));
            let b1 = set.push(format!("bias.{level}.hidden.bias"), 1, d, vec![T::zero(); d]);
            let w2 = set.push(format!("bias.{level}.output.weight"), m, d, sample(m * d, &weight));
            let b2 = set.push(format!("bias.{level}.output.bias"), 1, m, vec![T::zero(); m]);
            bias_nets.push(BiasNet {
                level,
                hidden: Affine { weight: w1, bias: b1, inp: n * d, out: d },
                output: Affine { weight: w2, bias: b2, inp: d, out: m },
            });
        }

        Self { set, item_table, scorer, bias_nets }
    }

    /// Number of rows in the item table, padding included.
    pub fn table_rows(&self) -> usize {
        self.set.get(self.item_table).rows
    }

    /// Checks the layout against a configuration.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let table = self.set.get(self.item_table);
        table.cols == config.row_width()
            && self.scorer.len() == config.scorer_depth
            && self.bias_nets.len() == config.levels
            && self
                .bias_nets
                .iter()
                .all(|b| b.output.out == config.windows(b.level) && b.hidden.inp == config.max_len * config.dim)
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut set = ParamSet::new();
        for (_, p) in self.set.iter() {
            set.push(p.name.clone(), p.rows, p.cols, p.data.iter().map(|x| U::lit(x.as_f64())).collect());
        }
        ModelParams { set, item_table: self.item_table, scorer: self.scorer.clone(), bias_nets: self.bias_nets.clone() }
    }
}

/// `W x + b` on plain slices.
pub(crate) fn affine_apply<T: Scalar>(set: &ParamSet<T>, layer: &Affine, x: &[T]) -> Vec<T> {
    let w = &set.get(layer.weight).data;
    let b = &set.get(layer.bias).data;
    w.chunks_exact(layer.inp)
        .zip(b)
        .map(|(row, &bias)| row.iter().zip(x).fold(bias, |acc, (&a, &v)| acc + a * v))
        .collect()
}
