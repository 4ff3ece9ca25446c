//! Contrastive batch training over the frozen features.

mod data;
mod labels;
mod loss;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use bindlab_tensor::{AdamW, Graph};

use crate::backbone::{ImageFeatures, QueryFeatures};
use crate::fusion::FusionModel;
use crate::{CoreError, Result};

pub use data::{
    encode_queries, encode_scenes, sample_batch, scene_noise_seed, BatchMode, BatchStrategy, EncodedData, Item,
    Origin, SampledBatch, TrainingData,
};
pub use labels::{label_matrix, LabelMatrix};
pub use loss::{nce_loss, sigmoid_bce_loss, LossKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Sampled batches per epoch.
    pub steps_per_epoch: usize,
    pub batch: BatchStrategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::SigmoidBce,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 30,
            steps_per_epoch: 70,
            batch: BatchStrategy {
                mode: BatchMode::Combined,
                batch_size: 4,
                hard_ratio: 0.5,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(CoreError::Config("weight decay must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(CoreError::Config("epochs must be at least 1".into()));
        }
        self.batch.validate()
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch loss; absent when the epoch ran no steps.
    pub loss: Option<f64>,
    pub val_metrics: BTreeMap<String, f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }
}

/// Unique images and queries of a batch with their label matrix.
pub struct PreparedBatch<'a> {
    pub images: Vec<&'a ImageFeatures>,
    pub queries: Vec<&'a QueryFeatures>,
    pub labels: LabelMatrix,
}

pub fn prepare_batch<'a>(batch: &SampledBatch, data: &TrainingData, encoded: &'a EncodedData) -> PreparedBatch<'a> {
    let mut scenes: Vec<usize> = Vec::new();
    let mut queries: Vec<usize> = Vec::new();
    for it in &batch.items {
        if !scenes.contains(&it.scene) {
            scenes.push(it.scene);
        }
        if !queries.contains(&it.query) {
            queries.push(it.query);
        }
    }
    let labels = LabelMatrix::from_fn(scenes.len(), queries.len(), |i, j| {
        data.queries[queries[j]].is_true_of(&data.scenes[scenes[i]])
    });
    PreparedBatch {
        images: scenes.iter().map(|&s| &encoded.images[s]).collect(),
        queries: queries.iter().map(|&q| &encoded.queries[q]).collect(),
        labels,
    }
}

/// Loss of one prepared batch recorded on a fresh graph, with gradients
/// accumulated into the model parameters.
pub fn batch_step(model: &mut FusionModel, loss: LossKind, batch: &PreparedBatch) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g, true);
    let scores = model.score_matrix_on(&mut g, &bound, &batch.images, &batch.queries)?;
    let l = loss.record(&mut g, scores, &batch.labels, model.config().logit_scale)?;
    let value = g.scalar(l)?;
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(l)?;
    model.params_mut().accumulate_grads(&g, &bound)?;
    Ok(value)
}

/// Per-epoch validation callback: receives the model and the 1-based epoch.
pub type Validator<'a> = dyn FnMut(&FusionModel, usize) -> Result<BTreeMap<String, f64>> + 'a;

pub fn train(
    model: &mut FusionModel,
    config: &TrainConfig,
    data: &TrainingData,
    encoded: &EncodedData,
    mut validation: Option<&mut Validator>,
) -> Result<TrainHistory> {
    config.validate()?;
    let opt = config.optimizer();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory::default();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut total = 0.0;
        for step in 0..config.steps_per_epoch {
            let sampled = sample_batch(&config.batch, data, &mut rng)?;
            let prepared = prepare_batch(&sampled, data, encoded);
            let value = batch_step(model, config.loss, &prepared)?;
            if !value.is_finite() {
                model.params_mut().zero_grad();
                return Err(CoreError::NonFiniteLoss {
                    epoch,
                    batch: step + 1,
                });
            }
            model.params_mut().adamw_step(&opt)?;
            total += value;
        }
        let val_metrics = match validation.as_mut() {
            Some(f) => f(model, epoch)?,
            None => BTreeMap::new(),
        };
        history.epochs.push(EpochRecord {
            epoch,
            loss: (config.steps_per_epoch > 0).then(|| total / config.steps_per_epoch as f64),
            val_metrics,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests;
