//! Adam training of the pairwise loss, early stopping on validation NDCG and checkpoints.

mod adam;
mod checkpoint;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{batches, Batch, DatasetBundle, SplitDataset, TargetMode};
use crate::diff::{DiffError, GradientMap, Tape};
use crate::eval::{metrics_from_ranks, rank_split, EvalError, MetricsAtK, Split};
use crate::model::{ModelConfig, ModelError};
use crate::specfn::DomainError;
use crate::Model;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint does not belong to this dataset (checkpoint {checkpoint}, dataset {dataset})")]
    DataMismatch { checkpoint: String, dataset: String },
}

/// Rows per gradient chunk. Chunks are reduced in index order, so results do not depend
/// on how many threads run them.
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation NDCG improvement.
    pub patience: usize,
    /// Seeds batch order, prefixes and negatives.
    pub data_seed: u64,
    /// Seeds parameter initialization.
    pub init_seed: u64,
    pub target_mode: TargetMode,
    /// Cutoff of the validation NDCG used for model selection.
    pub select_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 512,
            max_epochs: 200,
            patience: 10,
            data_seed: 0,
            init_seed: 0,
            target_mode: TargetMode::default(),
            select_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub valid: MetricsAtK,
}

/// Domain errors in the forward pass can only come from overflowed or NaN parameters.
fn forward_error(e: ModelError) -> TrainError {
    match &e {
        ModelError::Diff(DiffError::Domain { source: DomainError::NotFinite(_), .. }) => TrainError::NonFinite(e.to_string()),
        ModelError::Diff(DiffError::Domain { source: DomainError::NotPositive(v), .. }) if !v.is_finite() => {
            TrainError::NonFinite(e.to_string())
        }
        _ => TrainError::Model(e),
    }
}

/// Mean loss over one batch and its gradient (already divided by the batch size).
pub fn batch_gradient(model: &Model, batch: &Batch) -> Result<(f64, GradientMap<f64>), TrainError> {
    let rows: Vec<usize> = (0..batch.len()).collect();
    let parts: Vec<(f64, GradientMap<f64>)> = rows
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let mut total = None;
            for &i in chunk {
                let l = model.record_loss(&mut tape, batch.history(i), batch.positives[i], batch.negatives[i])
                    .map_err(forward_error)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l).map_err(ModelError::from)?,
                });
            }
            let total = total.expect("chunks are non-empty");
            let grads = tape.backward(total).map_err(ModelError::from)?;
            Ok((tape.scalar(total), grads))
        })
        .collect::<Result<_, TrainError>>()?;
    let mut loss = 0.0;
    let mut grads = GradientMap::new();
    for (l, g) in &parts {
        loss += l;
        grads.accumulate(g);
    }
    let scale = 1.0 / batch.len() as f64;
    grads.scale(scale);
    let mean = loss * scale;
    if !mean.is_finite() {
        return Err(TrainError::NonFinite("batch loss".into()));
    }
    Ok((mean, grads))
}

/// One pass over the epoch's shuffled batches. Returns the mean loss per example.
pub fn train_epoch(
    model: &mut Model,
    dataset: &SplitDataset,
    optimizer: &mut OptimizerState<f64>,
    config: &TrainConfig,
    epoch: u64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches(dataset, config.batch_size, config.data_seed, epoch, config.target_mode) {
        let (loss, grads) = batch_gradient(model, &batch)?;
        adam_step(&mut model.params.set, &grads, optimizer)?;
        total += loss * batch.len() as f64;
        count += batch.len();
    }
    Ok(if count > 0 { total / count as f64 } else { 0.0 })
}

/// Validation metrics at `k`.
pub fn validate(model: &Model, bundle: &DatasetBundle, k: usize) -> Result<MetricsAtK, TrainError> {
    let ranks = rank_split(model, bundle, Split::Valid)?;
    Ok(metrics_from_ranks(&ranks, k)?)
}

/// A training run that can be stepped epoch by epoch and checkpointed at any boundary.
pub struct Trainer<'a> {
    bundle: &'a DatasetBundle,
    state: Checkpoint,
    model: Model,
}

impl<'a> Trainer<'a> {
    pub fn new(model_config: ModelConfig, train: TrainConfig, bundle: &'a DatasetBundle) -> Result<Self, TrainError> {
        let num_items = bundle.dataset.num_items();
        let model = Model::new(model_config.clone(), num_items, train.init_seed)?;
        let optimizer = OptimizerState::new(train.adam, &model.params.set);
        let state = Checkpoint {
            model_config,
            num_items,
            params: model.params.clone(),
            optimizer,
            train,
            data_fingerprint: bundle.fingerprint(),
            epoch: 0,
            history: Vec::new(),
            stale: 0,
            best: None,
        };
        Ok(Self { bundle, state, model })
    }

    /// Continues from a checkpoint written by `checkpoint()`.
    pub fn resume(state: Checkpoint, bundle: &'a DatasetBundle) -> Result<Self, TrainError> {
        let fingerprint = bundle.fingerprint();
        if state.data_fingerprint != fingerprint {
            return Err(TrainError::DataMismatch { checkpoint: state.data_fingerprint, dataset: fingerprint });
        }
        let model = state.model()?;
        if !state.optimizer.matches(&model.params.set) {
            return Err(TrainError::Shape("optimizer state does not match the parameters".into()));
        }
        Ok(Self { bundle, state, model })
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.state.train.max_epochs || (self.state.epoch > 0 && self.state.stale >= self.state.train.patience)
    }

    /// Trains one epoch, validates, and updates the best snapshot.
    pub fn step(&mut self) -> Result<EpochRecord, TrainError> {
        let epoch = self.state.epoch as u64;
        let train = self.state.train.clone();
        let loss = train_epoch(&mut self.model, &self.bundle.dataset, &mut self.state.optimizer, &train, epoch)?;
        let valid = validate(&self.model, self.bundle, train.select_k)?;
        let record = EpochRecord { epoch: self.state.epoch + 1, loss, valid };
        let best_so_far = self.state.best.as_ref().map(|b| b.history.last().expect("snapshot has history").valid.ndcg);
        self.state.epoch += 1;
        self.state.params = self.model.params.clone();
        self.state.history.push(record.clone());
        if best_so_far.is_none_or(|b| valid.ndcg > b) {
            self.state.stale = 0;
            self.state.best = None;
            self.state.best = Some(Box::new(self.state.clone()));
        } else {
            self.state.stale += 1;
        }
        Ok(record)
    }

    /// Full resumable state.
    pub fn checkpoint(&self) -> &Checkpoint {
        &self.state
    }

    /// Runs until early stopping or the epoch limit, calling `on_epoch` after each epoch.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochRecord, &Checkpoint)) -> Result<Checkpoint, TrainError> {
        while !self.is_done() {
            let record = self.step()?;
            on_epoch(&record, &self.state);
        }
        Ok(self.state)
    }
}

/// Trains with early stopping and returns the final state; its `best_snapshot()` is the
/// selected model.
pub fn fit(model_config: ModelConfig, train: TrainConfig, bundle: &DatasetBundle) -> Result<Checkpoint, TrainError> {
    Trainer::new(model_config, train, bundle)?.run(|_, _| {})
}
