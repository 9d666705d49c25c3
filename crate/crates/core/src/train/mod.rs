//! Adam, the epoch loop with early stopping, and checkpoints.

pub mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{calibrate_and_average, AggregateError, EstimateSet};
use crate::encoding::EncodingConfig;
use crate::geometry::angular_error;
use crate::losses::{aggregate_loss, patch_loss, LossError};
use crate::model::{Model, ModelConfig, ModelError, ModelWeights};
use crate::synth::{derive_seed, SequenceSample};
use crate::tensor::{Graph, Mode, Real, Tensor};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError, TrainingMeta};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite gradient in weight section {section}")]
    NonFiniteGradient { section: String },
    #[error("non-finite loss at epoch {epoch}, sequence {scene_id}")]
    NonFiniteLoss { epoch: usize, scene_id: u64 },
    #[error("validation failed on sequence {scene_id}: {source}")]
    Validation { scene_id: u64, source: AggregateError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("metrics sink: {0}")]
    Sink(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Weight of the calibrated-mean loss added to the per-patch loss.
    pub aggregate_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr: 2e-5,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 100,
            patience: 5,
            seed: 0,
            aggregate_weight: 0.0,
        }
    }

    /// The small network trains from scratch on few sequences, so it takes a
    /// larger step than the full-size preset.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            max_epochs: 30,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        if self.patience < 1 {
            return bad("patience must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("need 0 <= beta1, beta2 < 1 and eps > 0".into());
        }
        if !(self.aggregate_weight >= 0.0) {
            return bad("aggregate weight must be >= 0".into());
        }
        Ok(())
    }
}

/// First and second moment accumulators, one per weight section.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(weights: &ModelWeights<T>) -> Self {
        let zeros = || weights.tensors().iter().map(|w| Tensor::zeros(w.shape())).collect();
        Self { t: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step<T: Real>(
    weights: &mut ModelWeights<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let n = weights.tensors().len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(TrainError::Config(format!(
            "{} gradients and {}/{} moments for {n} sections",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != weights.tensors()[i].shape() {
            return Err(TrainError::Config(format!("gradient shape mismatch in {}", weights.names()[i])));
        }
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient {
                section: weights.names()[i].clone(),
            });
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, w) in weights.tensors_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (wj, &gj)) in w.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            let g = gj.f64();
            let mj = b1 * m[j].f64() + (1.0 - b1) * g;
            let vj = b2 * v[j].f64() + (1.0 - b2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let step = cfg.lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *wj = T::of(wj.f64() - step);
        }
    }
    Ok(())
}

/// Early stopping on a metric where lower is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience: patience.max(1), best: None, stale: 0 }
    }

    pub fn observe(&mut self, epoch: usize, metric: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if !(metric < b) => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, metric));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One line of the metrics log. Epoch 0 is the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_mean_err_deg: f64,
    pub wall_ms: u64,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub optimizer: AdamState<f32>,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub best_val_deg: f64,
}

impl TrainOutcome {
    pub fn checkpoint(&self, seed: u64, with_optimizer: bool) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: with_optimizer.then(|| self.optimizer.clone()),
            meta: TrainingMeta {
                epoch: self.best_epoch,
                val_mean_err_deg: self.best_val_deg,
                seed,
            },
        }
    }
}

/// Mean angular error (degrees) of the calibrated-mean aggregate.
pub fn mean_aggregated_error<T: Real>(model: &Model<T>, samples: &[SequenceSample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        let raw = model.predict(s)?;
        let v = EstimateSet::from_sample(s, &raw)
            .and_then(|e| calibrate_and_average(&e))
            .map_err(|source| TrainError::Validation { scene_id: s.scene_id, source })?;
        total += angular_error(v, s.gt_world)
            .map_err(|e| TrainError::Validation { scene_id: s.scene_id, source: e.into() })?
            .to_degrees();
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Loss and summed weight gradients for one batch. Each sequence draws its
/// dropout masks from its own seed, so the result does not depend on the
/// order of `batch`.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    batch: &[&SequenceSample],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Vec<Tensor<T>>), TrainError> {
    let mut sum: Vec<Tensor<T>> = model.weights.tensors().iter().map(|w| Tensor::zeros(w.shape())).collect();
    let mut loss_sum = 0.0;
    let scale = T::of(1.0 / batch.len() as f64);
    for sample in batch {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(cfg.seed, epoch as u64), sample.scene_id));
        let mut g = Graph::new();
        let f = model.forward_sequence(&mut g, sample, Mode::Train, &mut rng, true)?;
        let out = f.trace.output;
        let (mut loss, parts) = patch_loss(&mut g, out, &sample.camera_targets())?;
        let mut value = parts.total;
        if cfg.aggregate_weight > 0.0 {
            let (agg, agg_parts) = aggregate_loss(&mut g, out, &sample.patch_rotations(), sample.gt_world)?;
            let agg = g.scale(agg, T::of(cfg.aggregate_weight));
            loss = g.add(loss, agg).map_err(ModelError::from)?;
            value += cfg.aggregate_weight * agg_parts.total;
        }
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, scene_id: sample.scene_id });
        }
        loss_sum += value;
        let mut grads = g.backward(loss).map_err(ModelError::from)?;
        for (acc, &p) in sum.iter_mut().zip(&f.params) {
            if let Some(gr) = grads.take(p) {
                for (a, &b) in acc.data_mut().iter_mut().zip(gr.data()) {
                    *a = *a + b * scale;
                }
            }
        }
    }
    Ok((loss_sum / batch.len() as f64, sum))
}

/// Trains from a fresh initialization (seeded by `train_cfg.seed`), reports
/// each epoch to `on_epoch`, and returns the best-validation weights.
pub fn train_model(
    train: &[SequenceSample],
    val: &[SequenceSample],
    model_cfg: &ModelConfig,
    enc_cfg: &EncodingConfig,
    train_cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Config("training and validation sets must be nonempty".into()));
    }
    let mut model = Model::<f32>::new(model_cfg.clone(), *enc_cfg, derive_seed(train_cfg.seed, u64::MAX))?;
    let mut optimizer = AdamState::new(&model.weights);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut history = Vec::new();

    let start = Instant::now();
    let initial = EpochMetrics {
        epoch: 0,
        train_loss: None,
        val_mean_err_deg: mean_aggregated_error(&model, val)?,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    on_epoch(&initial)?;
    history.push(initial);

    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut best = (model.weights.clone(), optimizer.clone());
    for epoch in 1..=train_cfg.max_epochs {
        let t0 = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, train_cfg, epoch)?;
            adam_step(&mut model.weights, &grads, &mut optimizer, train_cfg)?;
            loss_total += loss;
            batches += 1;
        }
        let val_err = mean_aggregated_error(&model, val)?;
        let m = EpochMetrics {
            epoch,
            train_loss: Some(loss_total / batches as f64),
            val_mean_err_deg: val_err,
            wall_ms: t0.elapsed().as_millis() as u64,
        };
        on_epoch(&m)?;
        history.push(m);
        match stopper.observe(epoch, val_err) {
            StopDecision::Improved => best = (model.weights.clone(), optimizer.clone()),
            StopDecision::Continue => {}
            StopDecision::Stop => break,
        }
    }
    let (best_epoch, best_val_deg) = stopper.best().expect("at least one epoch ran when max_epochs >= 1");
    model.weights = best.0;
    Ok(TrainOutcome {
        model,
        optimizer: best.1,
        history,
        best_epoch,
        best_val_deg,
    })
}
