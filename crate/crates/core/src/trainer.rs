//! Mini-batch training with validation monitoring and early stopping.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Batch, LossBreakdown, Model, Pass};
use crate::nn::{Adam, Tape};
use crate::schedule::io::csv_writer;
use crate::schedule::{batch_normalize, label_weights, Dataset, EncodedSchedule, LabelVector, Split};

/// Stream used for the latent draws of validation passes, so every validation
/// of the same parameters gives the same number.
const EVAL_STREAM: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub learning_rate: f64,
    /// Epochs over which the KLD weight rises linearly from 0 to `β`; 0 disables.
    pub kl_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 150,
            batch_size: 1024,
            patience: 10,
            seed: 0,
            shuffle: true,
            learning_rate: 1e-3,
            kl_warmup_epochs: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig(
                "max_epochs, batch_size and patience must all be >= 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub validation: LossBreakdown,
    /// Infinite while the KLD weight is still warming up.
    pub best_validation: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    /// Long format: one row per epoch and split.
    pub fn write_csv(&self, path: &Path, hash: Option<&str>) -> Result<()> {
        let mut w = csv_writer(path, hash)?;
        let csv_err = |e| Error::csv(path, e);
        w.write_record(["epoch", "split", "activity_nll", "duration_mse", "kld", "total", "best_validation"])
            .map_err(csv_err)?;
        for r in &self.epochs {
            for (split, l) in [("train", r.train), ("validation", r.validation)] {
                w.write_record([
                    r.epoch.to_string(),
                    split.to_string(),
                    l.activity_nll.to_string(),
                    l.duration_mse.to_string(),
                    l.kld.to_string(),
                    l.total.to_string(),
                    r.best_validation.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Unweighted reconstruction losses over a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionLosses {
    /// Mean per-step masked negative log-likelihood of the activity.
    pub activity_nll: f64,
    /// Mean per-step masked squared duration error, without `α`.
    pub duration_mse: f64,
    /// Mean divergence to the prior, without `β`.
    pub kld: f64,
    pub samples: usize,
}

pub struct Trained {
    pub model: Model,
    pub history: History,
}

fn gather<'a>(dataset: &'a Dataset, idx: &[usize]) -> (Vec<&'a EncodedSchedule>, Vec<&'a LabelVector>) {
    let s = dataset.samples();
    (
        idx.iter().map(|&i| &s[i].schedule).collect(),
        idx.iter().map(|&i| &s[i].labels).collect(),
    )
}

/// Mean loss of `model` over a split, in batches, with unit weights and the
/// evaluation pass. `weights` override the configured `(α, β)`.
fn split_loss(model: &Model, dataset: &Dataset, split: Split, batch_size: usize, weights: Option<(f64, f64)>) -> Result<LossBreakdown> {
    let idx = dataset.indices(split);
    if idx.is_empty() {
        return Err(Error::Empty(format!("{} split", split.as_str())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(dataset.seed());
    rng.set_stream(EVAL_STREAM);
    let mut acc = LossBreakdown::default();
    let n = idx.len() as f64;
    for chunk in idx.chunks(batch_size) {
        let (s, l) = gather(dataset, chunk);
        let ones = vec![1.0; chunk.len()];
        let batch = Batch {
            schedules: &s,
            labels: &l,
            weights: &ones,
        };
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &s, &l, Pass::evaluation(), &mut rng)?;
        let vars = match weights {
            Some((a, b)) => model.loss_graph_with(&mut tape, &out, &batch, a, b),
            None => model.loss_graph(&mut tape, &out, &batch),
        };
        let loss = vars.read(&tape);
        let f = chunk.len() as f64 / n;
        acc.activity_nll += f * loss.activity_nll;
        acc.duration_mse += f * loss.duration_mse;
        acc.kld += f * loss.kld;
        acc.total += f * loss.total;
    }
    Ok(acc)
}

/// Reconstruction losses of `model` on a split: no label weighting, no `α`, no `β`.
pub fn evaluate_losses(model: &Model, dataset: &Dataset, split: Split) -> Result<ReconstructionLosses> {
    let l = split_loss(model, dataset, split, 1024, Some((1.0, 1.0)))?;
    Ok(ReconstructionLosses {
        activity_nll: l.activity_nll,
        duration_mse: l.duration_mse,
        kld: l.kld,
        samples: dataset.count(split),
    })
}

/// Share of `β` applied in a 1-based epoch.
pub fn kl_factor(epoch: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        ((epoch - 1) as f64 / warmup as f64).min(1.0)
    }
}

/// Trains with Adam, keeps the parameters of the best validation epoch and
/// stops after `patience` epochs without improvement.
pub fn train(mut model: Model, dataset: &Dataset, tcfg: &TrainConfig) -> Result<Trained> {
    tcfg.validate()?;
    let train_idx = dataset.indices(Split::Train);
    if train_idx.is_empty() || dataset.count(Split::Validation) == 0 {
        return Err(Error::Empty("training or validation split".into()));
    }
    let raw_weights = if model.config().label_weighting {
        label_weights(dataset)
    } else {
        vec![1.0; dataset.len()]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut adam = Adam::new(tcfg.learning_rate);
    let mut order = train_idx;
    let mut history = History::default();
    let mut best = f64::INFINITY;
    let mut best_store = model.store().values_snapshot();
    let mut since_best = 0;

    let (alpha, beta) = (model.config().alpha, model.config().beta);
    for epoch in 1..=tcfg.max_epochs {
        let beta_now = beta * kl_factor(epoch, tcfg.kl_warmup_epochs);
        if tcfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut train_acc = LossBreakdown::default();
        let n = order.len() as f64;
        for (b, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            let (s, l) = gather(dataset, chunk);
            let w = batch_normalize(&chunk.iter().map(|&i| raw_weights[i]).collect::<Vec<_>>());
            let batch = Batch {
                schedules: &s,
                labels: &l,
                weights: &w,
            };
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &s, &l, Pass::training(model.config()), &mut rng)?;
            let vars = model.loss_graph_with(&mut tape, &out, &batch, alpha, beta_now);
            let loss = vars.read(&tape);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: format!("{loss:?}"),
                });
            }
            model.store_mut().zero_grads();
            tape.backward(vars.total, model.store_mut());
            adam.step(model.store_mut())?;
            let f = chunk.len() as f64 / n;
            train_acc.activity_nll += f * loss.activity_nll;
            train_acc.duration_mse += f * loss.duration_mse;
            train_acc.kld += f * loss.kld;
            train_acc.total += f * loss.total;
        }

        let val = split_loss(&model, dataset, Split::Validation, tcfg.batch_size.max(256), None)?;
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                detail: format!("validation {val:?}"),
            });
        }
        // the monitored objective is only the configured one after warm-up
        let warming = epoch <= tcfg.kl_warmup_epochs && epoch < tcfg.max_epochs;
        if !warming {
            if val.total < best {
                best = val.total;
                best_store = model.store().values_snapshot();
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        history.epochs.push(EpochRecord {
            epoch,
            train: train_acc,
            validation: val,
            best_validation: best,
        });
        if since_best >= tcfg.patience {
            history.stopped_early = true;
            break;
        }
    }
    model.store_mut().copy_values_from(&best_store)?;
    Ok(Trained { model, history })
}

/// Validation loss exactly as monitored during training.
pub fn validation_loss(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<LossBreakdown> {
    split_loss(model, dataset, Split::Validation, batch_size.max(256), None)
}
