//! Loss, learning-rate schedule, AdamW and the training loop.

mod adamw;
mod gradcheck;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adamw::{adamw_step, AdamState};
pub use gradcheck::{check_gradients, GradCheck, GRAD_CHECK_FLOOR};
pub use train::{train, write_history, EarlyStopping, EpochRecord, TrainError, TrainEvent, TrainOutcome};

pub const PAPER_SEEDS: [u64; 3] = [42, 78, 123];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seeds: Vec<u64>,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_peak: 1e-4,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            epochs: 10,
            batch_size: 1,
            patience: 3,
            seeds: PAPER_SEEDS.to_vec(),
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
#[error("invalid train config: {0}")]
pub struct TrainConfigError(pub String);

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainConfigError> {
        let err = |m: &str| Err(TrainConfigError(m.to_string()));
        if !(self.warmup_ratio > 0.0 && self.warmup_ratio < 1.0) {
            return err("warmup_ratio must be in (0, 1)");
        }
        if self.patience == 0 || self.epochs == 0 || self.batch_size == 0 {
            return err("patience, epochs and batch_size must be at least 1");
        }
        if !(self.lr_peak > 0.0) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return err("lr_peak and eps must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return err("betas must be in [0, 1)");
        }
        if self.seeds.is_empty() {
            return err("at least one seed is required");
        }
        Ok(())
    }

    /// Optimizer steps for `n_train` examples, fixed before training starts.
    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * n_train.div_ceil(self.batch_size)
    }
}

/// `|pred − target|` and its subgradient, 0 at the kink.
pub fn mae_loss(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    let g = if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    };
    (d.abs(), g)
}

pub fn mean_mae(pairs: &[(f64, f64)]) -> f64 {
    pairs.iter().map(|&(p, t)| mae_loss(p, t).0).sum::<f64>() / pairs.len() as f64
}

/// Linear warmup from 0 over `warmup_ratio · total` steps, then cosine decay
/// to 0 at `total`.
pub fn cosine_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let total = total_steps as f64;
    let warm = cfg.warmup_ratio * total;
    let s = step as f64;
    if s < warm {
        return cfg.lr_peak * s / warm;
    }
    let span = total - warm;
    let progress = if span > 0.0 { ((s - warm) / span).min(1.0) } else { 1.0 };
    (cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        let (l, g) = mae_loss(0.7, 0.5);
        assert!((l - 0.2).abs() < 1e-15);
        assert_eq!(g, 1.0);
        assert_eq!(mae_loss(0.5, 0.5), (0.0, 0.0));
        assert_eq!(mae_loss(0.1, 0.4).1, -1.0);
        assert!((mean_mae(&[(0.1, 0.0), (0.0, 0.3)]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn schedule_landmarks() {
        let c = TrainConfig::default();
        assert_eq!(cosine_lr(0, 1000, &c), 0.0);
        assert!((cosine_lr(100, 1000, &c) - 1e-4).abs() < 1e-18);
        assert!((cosine_lr(550, 1000, &c) - 5e-5).abs() < 1e-15);
        assert!(cosine_lr(1000, 1000, &c).abs() < 1e-18);
        assert!((cosine_lr(50, 1000, &c) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_is_continuous_and_non_negative() {
        let c = TrainConfig::default();
        for total in [10, 37, 480, 11520] {
            let mut prev = cosine_lr(0, total, &c);
            for s in 1..=total {
                let lr = cosine_lr(s, total, &c);
                assert!(lr >= 0.0);
                assert!((lr - prev).abs() <= c.lr_peak / (c.warmup_ratio * total as f64) + 1e-12, "{total} {s}");
                prev = lr;
            }
        }
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        assert_eq!(TrainConfig::default().total_steps(480), 4800);
        for bad in [
            TrainConfig { warmup_ratio: 0.0, ..TrainConfig::default() },
            TrainConfig { warmup_ratio: 1.0, ..TrainConfig::default() },
            TrainConfig { patience: 0, ..TrainConfig::default() },
            TrainConfig { seeds: vec![], ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
