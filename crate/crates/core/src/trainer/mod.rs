//! Adam training loop with per-epoch learning-rate decay, early stopping on
//! validation loss, max-norm projection, checkpoints and evaluation.

mod adam;
mod checkpoint;
mod metrics;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{cross_entropy, l2_penalty, l2_value, maxnorm_all, ClassPrediction};
use crate::container::ContainerError;
use crate::dsp::EpochTensor;
use crate::encoder::{update_running_stats, LstmImpl};
use crate::ingest::{nested_subsample, stratified_split, IngestError, Split};
use crate::model::{Model, ModelConfig};
use crate::params::{Mode, ModelError};
use crate::tensor::{Precision, Tape, TensorError};

pub use adam::{adam_step, adam_update, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use metrics::{MetricsLog, MetricsRow};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("the {0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("label {label} outside the model's {n_classes} classes")]
    LabelMismatch { label: usize, n_classes: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiplier applied to the learning rate once per epoch.
    pub decay_rate: f64,
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-7,
            batch_size: 32,
            epochs: 100,
            decay_rate: 0.95,
            patience: 15,
            val_fraction: 0.2,
            seed: 0,
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale model: a larger step size and smaller
    /// batches, so a few dozen epochs suffice.
    pub fn desk(seed: u64) -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return bad("batch_size, epochs and patience must be at least 1");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }

    /// Learning rate used throughout 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay_rate.powi(epoch as i32)
    }
}

/// Tracks the best validation loss and says when `patience` epochs have
/// passed without a strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> EarlyStopping {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            stale: 0,
        }
    }

    /// Records one epoch. Returns whether the loss improved on the best so
    /// far.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

/// Splits labelled epochs into stratified train and validation parts.
pub fn split_epochs(epochs: &EpochTensor, fraction: f64, seed: u64) -> Result<(EpochTensor, EpochTensor)> {
    let assign = stratified_split(&epochs.labels, fraction, seed)?;
    let pick = |s: Split| -> Vec<usize> { (0..assign.len()).filter(|&i| assign[i] == s).collect() };
    Ok((epochs.select(&pick(Split::Train)), epochs.select(&pick(Split::Val))))
}

/// Best checkpoint and per-epoch log of one training run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: MetricsLog,
}

fn check_labels(epochs: &EpochTensor, n_classes: usize) -> Result<()> {
    match epochs.labels.iter().find(|&&l| l >= n_classes) {
        Some(&label) => Err(TrainError::LabelMismatch { label, n_classes }),
        None => Ok(()),
    }
}

fn is_non_finite(e: &ModelError) -> bool {
    matches!(e, ModelError::Tensor(TensorError::NonFinite { .. }))
}

/// Trains a freshly initialized model (seeded with `cfg.seed`) on `train`,
/// validating on `val` after every epoch. The returned checkpoint holds the
/// parameters from the epoch with the lowest validation loss.
pub fn fit(model_cfg: &ModelConfig, cfg: &TrainConfig, train: &EpochTensor, val: &EpochTensor) -> Result<FitOutcome> {
    cfg.validate()?;
    let model = Model::init(model_cfg.clone(), cfg.seed, cfg.precision)?;
    fit_from(model, cfg, train, val)
}

/// [`fit`] starting from existing parameters.
pub fn fit_from(mut model: Model, cfg: &TrainConfig, train: &EpochTensor, val: &EpochTensor) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.n_trials() == 0 {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.n_trials() == 0 {
        return Err(TrainError::EmptySplit("validation"));
    }
    let n_classes = model.n_classes();
    check_labels(train, n_classes)?;
    check_labels(val, n_classes)?;
    let clf = model.config.classifier.clone();
    let momentum = model.config.encoder.bn_momentum;

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut metrics = MetricsLog::default();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train.n_trials()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let sub = train.select(idx);
            let x = sub.to_tensor(cfg.precision);
            let mut tape = Tape::new();
            let step = (|| -> std::result::Result<_, ModelError> {
                let fwd = model.forward(&mut tape, &x, Mode::Train, LstmImpl::Fused, &mut dropout_rng)?;
                let ce = tape.cross_entropy(fwd.probs, &sub.labels)?;
                let loss = match l2_penalty(&mut tape, &model.params, &fwd.bound, clf.l2_lambda)? {
                    Some(pen) => tape.add(ce, pen)?,
                    None => ce,
                };
                let grads = tape.backward(loss)?;
                Ok((fwd, loss, grads))
            })();
            let (fwd, loss, grads) = match step {
                Ok(v) => v,
                Err(e) if is_non_finite(&e) => return Err(TrainError::NonFinite { epoch, batch }),
                Err(e) => return Err(e.into()),
            };
            let loss_value = tape.data(loss)[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch });
            }
            loss_sum += loss_value * idx.len() as f64;
            correct += tape
                .data(fwd.probs)
                .chunks(n_classes)
                .zip(&sub.labels)
                .filter(|(p, &l)| ClassPrediction::from_probs(p.to_vec(), None).label == l)
                .count();
            let g: Vec<Option<Vec<f64>>> = fwd
                .bound
                .vars()
                .iter()
                .map(|&v| grads.raw(v).map(<[f64]>::to_vec))
                .collect();
            adam_step(&mut model.params, &g, &mut adam, lr, cfg).map_err(|_| TrainError::NonFinite { epoch, batch })?;
            maxnorm_all(&mut model.params, clf.maxnorm_c);
            update_running_stats(&mut model.params, &fwd.bn_stats, momentum)?;
        }

        let val_probs = model.predict_probs(val, cfg.batch_size)?;
        let penalty = l2_value(&model.params, clf.l2_lambda);
        let val_loss = cross_entropy(&val_probs, &val.labels)? + penalty;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: order.len().div_ceil(cfg.batch_size),
            });
        }
        let val_acc = accuracy(&val_probs, &val.labels);
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / train.n_trials() as f64,
            train_acc: correct as f64 / train.n_trials() as f64,
            val_loss,
            val_acc,
            lr,
        };
        log::info!(
            "epoch {epoch}: train loss {:.4} acc {:.3}, val loss {:.4} acc {:.3}",
            row.train_loss,
            row.train_acc,
            row.val_loss,
            row.val_acc
        );
        metrics.rows.push(row);
        if stopper.observe(epoch, val_loss) {
            best = Some(Checkpoint {
                model: model.clone(),
                train: cfg.clone(),
                adam: adam.clone(),
                epoch,
                best_val_loss: val_loss,
            });
        }
        if stopper.should_stop() {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    let checkpoint = best.expect("the first epoch always improves on an infinite best loss");
    Ok(FitOutcome { checkpoint, metrics })
}

fn accuracy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let hits = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| ClassPrediction::from_probs(p.to_vec(), None).label == l)
        .count();
    hits as f64 / labels.len().max(1) as f64
}

/// Accuracy, per-class recall, confusion matrix (rows are true classes) and
/// mean cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub n_classes: usize,
    pub accuracy: f64,
    /// `None` for classes absent from the data.
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
    pub mean_loss: f64,
}

/// Scores class probabilities against labels.
pub fn evaluate_probs(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<Evaluation> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (p, &l) in probs.iter().zip(labels) {
        if l >= n_classes || p.len() != n_classes {
            return Err(TrainError::LabelMismatch {
                label: l.max(p.len()),
                n_classes,
            });
        }
        let guess = ClassPrediction::from_probs(p.clone(), None).label;
        confusion[l][guess] += 1;
    }
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let hits: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        n_classes,
        accuracy: hits as f64 / labels.len() as f64,
        per_class,
        confusion,
        mean_loss: cross_entropy(probs, labels)?,
    })
}

pub fn evaluate(model: &Model, epochs: &EpochTensor, batch_size: usize) -> Result<Evaluation> {
    check_labels(epochs, model.n_classes())?;
    let probs = model.predict_probs(epochs, batch_size)?;
    evaluate_probs(&probs, &epochs.labels, model.n_classes())
}

/// One row of the data-efficiency table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub n_train: usize,
    pub accuracy: f64,
    pub val_loss: f64,
}

/// For each `k`, trains on `k` trials per class drawn from `pool` (nested
/// across `k`) and evaluates the best checkpoint on the fixed `val` set.
pub fn sweep_data_efficiency(
    pool: &EpochTensor,
    val: &EpochTensor,
    ks: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    let picks = ks
        .iter()
        .map(|&k| nested_subsample(&pool.labels, k, cfg.seed))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let mut rows = Vec::with_capacity(ks.len());
    for (&k, idx) in ks.iter().zip(picks) {
        let train = pool.select(&idx);
        let out = fit(model_cfg, cfg, &train, val)?;
        let eval = evaluate(&out.checkpoint.model, val, cfg.batch_size)?;
        log::info!("k = {k}: accuracy {:.3}", eval.accuracy);
        rows.push(SweepRow {
            k,
            n_train: idx.len(),
            accuracy: eval.accuracy,
            val_loss: out.checkpoint.best_val_loss,
        });
    }
    Ok(rows)
}
