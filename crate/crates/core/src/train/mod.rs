//! Classifier head, losses, Adam, metrics and the seeded training loop.

pub mod checkpoint;
pub mod classifier;
pub mod metrics;
pub mod optim;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::SequenceModel;
use crate::tensor::DenseTensor;

pub use classifier::{loss, softmax, Classifier, HeadMode};
pub use metrics::{accuracy, argmax, average_precision, mean_average_precision};
pub use optim::{adam_step, Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub dropout: f64,
    pub ridge: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Worker threads for batch gradients. 1 is the bitwise-deterministic reference.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            dropout: 0.25,
            ridge: 0.01,
            batch_size: 16,
            epochs: 30,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        unit("dropout", self.dropout)?;
        unit("beta1", self.adam.beta1)?;
        unit("beta2", self.adam.beta2)?;
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate < 1.0) {
            return Err(Error::Argument(format!(
                "learning rate must lie in (0, 1), got {}",
                self.adam.learning_rate
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::Argument(format!("ridge must be non-negative, got {}", self.ridge)));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.threads == 0 {
            return Err(Error::Argument("batch size, epochs and threads must be positive".into()));
        }
        Ok(())
    }
}

/// One training or evaluation sequence: `(T, M)` frames and a 0/1 target
/// vector over the classes (one-hot for softmax heads).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub frames: DenseTensor,
    pub target: Vec<f64>,
}

impl Example {
    pub fn class(&self) -> usize {
        argmax(&self.target)
    }
}

/// Everything needed to resume training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: SequenceModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: SequenceModel, seed: u64) -> Self {
        Self {
            adam: Adam::new(&model),
            model,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn adam_update(&mut self, grads: &SequenceModel, cfg: &AdamConfig) -> Result<()> {
        self.adam.update(&mut self.model, grads, cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub name: &'static str,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub metric: Metric,
}

impl EpochRecord {
    /// Tab-separated log line: epoch, train loss, metric name, metric value.
    pub fn line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.epoch, self.train_loss, self.metric.name, self.metric.value
        )
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// State after the last epoch.
    pub state: TrainState,
    /// State at the best validation metric; this is what gets checkpointed.
    pub best: TrainState,
    pub best_metric: f64,
    pub log: Vec<EpochRecord>,
}

/// Deterministic split of `n` items into (train, validation) index sets.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

/// Class probabilities for every example, without dropout.
pub fn predict_all(model: &SequenceModel, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let seqs: Vec<&DenseTensor> = chunk.iter().map(|e| &e.frames).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len() as u64).map(ChaCha8Rng::seed_from_u64).collect();
        let (h, _) = model.cell.forward_batch(&seqs, 0.0, &mut rngs)?;
        for b in 0..chunk.len() {
            out.push(model.head.classify(h.row(b))?);
        }
    }
    Ok(out)
}

/// Accuracy for softmax heads, mean average precision for logistic heads.
pub fn evaluate(model: &SequenceModel, examples: &[Example]) -> Result<Metric> {
    let probs = predict_all(model, examples)?;
    match model.head.mode {
        HeadMode::Softmax => {
            let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            let truth: Vec<usize> = examples.iter().map(Example::class).collect();
            Ok(Metric {
                name: "accuracy",
                value: accuracy(&pred, &truth)?,
            })
        }
        HeadMode::Logistic => {
            let labels: Vec<Vec<bool>> = examples
                .iter()
                .map(|e| e.target.iter().map(|&y| y > 0.5).collect())
                .collect();
            Ok(Metric {
                name: "map",
                value: mean_average_precision(&probs, &labels)?,
            })
        }
    }
}

/// Mini-batch training with seeded shuffling and dropout.
///
/// After every epoch the validation metric is computed; whenever it improves
/// the state is written to `checkpoint` (if given). A non-finite loss or
/// gradient aborts with [`Error::Diverged`], leaving the last checkpoint in place.
pub fn fit(
    model: SequenceModel,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<FitOutcome> {
    fit_with(model, train, val, cfg, checkpoint, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with(
    model: SequenceModel,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }
    let classes = model.head.classes();
    if let Some(e) = train.iter().chain(val).find(|e| e.target.len() != classes) {
        return Err(Error::Shape(format!(
            "target of length {} for a {classes}-class head",
            e.target.len()
        )));
    }
    let mut state = TrainState::new(model, cfg.seed);
    let mut best: Option<(f64, TrainState)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut state.rng);
        let mut loss_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let seqs: Vec<&DenseTensor> = batch.iter().map(|&i| &train[i].frames).collect();
            let targets: Vec<&[f64]> = batch.iter().map(|&i| train[i].target.as_slice()).collect();
            let seeds: Vec<u64> = batch.iter().map(|_| state.rng.random()).collect();
            let (loss, grads) =
                state
                    .model
                    .loss_and_grad(&seqs, &targets, &seeds, cfg.dropout, cfg.ridge, cfg.threads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("training loss became {loss}"),
                });
            }
            state.adam_update(&grads, &cfg.adam).map_err(|e| match e {
                Error::Numerics(reason) => Error::Diverged { epoch, reason },
                other => other,
            })?;
            loss_total += loss * batch.len() as f64;
        }
        let metric = evaluate(&state.model, val).map_err(|e| match e {
            Error::Numerics(reason) => Error::Diverged { epoch, reason },
            other => other,
        })?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_total / train.len() as f64,
            metric,
        };
        on_epoch(&record);
        log.push(record);
        if best.as_ref().is_none_or(|(b, _)| metric.value > *b) {
            if let Some(path) = checkpoint {
                checkpoint::write_checkpoint(path, &state)?;
            }
            best = Some((metric.value, state.clone()));
        }
    }
    let (best_metric, best_state) = best.expect("at least one epoch");
    Ok(FitOutcome {
        state,
        best: best_state,
        best_metric,
        log,
    })
}
