use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{adamw_step, cosine_lr, mae_loss, AdamState, TrainConfig, TrainConfigError};
use crate::eval::EncodedExample;
use crate::net::{Mode, Model, NetError, TrainableParams};
use crate::scalar::Scalar;

/// One line of the training history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae_seconds: f64,
    pub lr_last: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    Step { step: usize, total_steps: usize, lr: f64, loss: f64 },
    Epoch(EpochRecord),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] TrainConfigError),
    #[error("training needs non-empty train and validation sets")]
    EmptySplit,
    /// The model is left holding the best parameters seen before the
    /// failure.
    #[error("numerical failure at epoch {epoch}, step {step}: {source}")]
    Numerical { source: NetError, epoch: usize, step: usize },
}

/// Counts epochs without a strict improvement of the validation metric.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, bad_epochs: 0 }
    }

    /// Records an epoch's metric; true when it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if metric < self.best {
            self.best = metric;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub best: TrainableParams<S>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae_s: f64,
    pub stopped_early: bool,
    pub total_steps: usize,
}

fn mix(seed: u64, step: usize) -> u64 {
    let mut z = seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn val_mae_seconds<S: Scalar>(
    model: &Model<S>,
    val: &[EncodedExample<S>],
    feats: Option<&[Array1<S>]>,
) -> Result<f64, NetError> {
    let mut sum = 0.0;
    for (i, ex) in val.iter().enumerate() {
        let o = match feats {
            Some(f) => model.params.head.forward(&f[i]),
            None => model.forward(&ex.input, Mode::Eval)?,
        };
        sum += ex.spec.duration * (o.as_f64() - ex.target).abs();
    }
    Ok(sum / val.len() as f64)
}

/// Trains `model.params` in place and leaves the best-validation parameters
/// in the model. Shuffling and dropout are driven by `seed`.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_set: &[EncodedExample<S>],
    val_set: &[EncodedExample<S>],
    cfg: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&TrainEvent),
) -> Result<TrainOutcome<S>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let n = train_set.len();
    let total = cfg.total_steps(n);
    // with a frozen body the head input never changes
    let head_only = !model.cfg.has_adapters();
    let (train_feats, val_feats) = if head_only {
        let f = |xs: &[EncodedExample<S>]| xs.iter().map(|e| model.features(&e.input)).collect::<Result<Vec<_>, _>>();
        let numerical = |source| TrainError::Numerical { source, epoch: 0, step: 0 };
        (Some(f(train_set).map_err(numerical)?), Some(f(val_set).map_err(numerical)?))
    } else {
        (None, None)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = AdamState::new(&model.params);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut lr = 0.0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            lr = cosine_lr(step, total, cfg);
            let mut acc: Option<TrainableParams<S>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train_set[i];
                let target = ex.target;
                let dloss = |o: S| S::lit(mae_loss(o.as_f64(), target).1 / batch.len() as f64);
                let result = match &train_feats {
                    Some(f) => Ok(model.head_forward_backward(&f[i], dloss)),
                    None => model.forward_backward(&ex.input, Mode::Train { dropout_seed: mix(seed, step) }, dloss),
                };
                let (o, g) = match result {
                    Ok(r) => r,
                    Err(source) => {
                        model.params = best;
                        return Err(TrainError::Numerical { source, epoch, step });
                    }
                };
                let loss = mae_loss(o.as_f64(), target).0;
                if !loss.is_finite() {
                    model.params = best;
                    let source = NetError::NonFinite { stage: "loss".into() };
                    return Err(TrainError::Numerical { source, epoch, step });
                }
                batch_loss += loss;
                match acc.as_mut() {
                    None => acc = Some(g),
                    Some(a) => {
                        for (mut dst, (_, src)) in a.tensors_mut().into_iter().zip(g.named_tensors()) {
                            dst += &src;
                        }
                    }
                }
            }
            adamw_step(&mut model.params, &acc.expect("non-empty batch"), &mut state, lr, cfg);
            loss_sum += batch_loss;
            observer(&TrainEvent::Step { step, total_steps: total, lr, loss: batch_loss / batch.len() as f64 });
            step += 1;
        }
        let val_mae = match val_mae_seconds(model, val_set, val_feats.as_deref()) {
            Ok(v) if v.is_finite() => v,
            other => {
                model.params = best;
                let source = other.err().unwrap_or(NetError::NonFinite { stage: "validation".into() });
                return Err(TrainError::Numerical { source, epoch, step });
            }
        };
        let record = EpochRecord { epoch, train_loss: loss_sum / n as f64, val_mae_seconds: val_mae, lr_last: lr };
        observer(&TrainEvent::Epoch(record.clone()));
        history.push(record);
        if stopper.observe(epoch, val_mae) {
            best = model.params.clone();
        }
        if stopper.should_stop() {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }
    model.params = best.clone();
    Ok(TrainOutcome {
        best,
        history,
        best_epoch: stopper.best_epoch,
        best_val_mae_s: stopper.best,
        stopped_early,
        total_steps: total,
    })
}

/// One JSON object per epoch.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> std::io::Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    crate::session::write_atomic(path, &out)
}
