use serde::{Deserialize, Serialize};

use crate::data::AugConfig;
use crate::error::{Error, Result};
use crate::supernet::WARMUP_END;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub drop_path_rate: f64,
    /// Sub-networks per super-network batch.
    pub n_a: usize,
    /// Fraction of training over which architecture sampling widens from
    /// the maxima to the full space.
    pub warmup_fraction: f64,
    /// Linear learning-rate warmup length.
    pub lr_warmup_epochs: f64,
    pub seed: u64,
    /// Evaluate every this many epochs; 0 disables evaluation.
    pub eval_every: u64,
    pub eval_batch_size: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Adds the per-patch token-labeling term to the loss.
    pub token_loss: bool,
    pub aug: AugConfig,
    /// Caps the run length below `epochs` worth of steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            base_lr: 5e-4,
            weight_decay: 0.05,
            drop_path_rate: 0.1,
            n_a: 16,
            warmup_fraction: WARMUP_END,
            lr_warmup_epochs: 5.0,
            seed: 0,
            eval_every: 1,
            eval_batch_size: 64,
            clip_grad_norm: Some(5.0),
            token_loss: true,
            aug: AugConfig::default(),
            max_steps: None,
        }
    }
}

/// Step counts derived from a config and a dataset size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn epoch_of(&self, step: u64) -> u64 {
        step / self.steps_per_epoch
    }

    /// Position of `step` within training, in `[0, 1]`.
    pub fn fraction(&self, step: u64) -> f64 {
        step as f64 / self.total_steps.max(1) as f64
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::contract(d));
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return bad(format!("drop_path_rate {} outside [0, 1)", self.drop_path_rate));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1]", self.warmup_fraction));
        }
        if !(self.lr_warmup_epochs >= 0.0 && self.lr_warmup_epochs.is_finite()) {
            return bad(format!("lr_warmup_epochs {} must be non-negative", self.lr_warmup_epochs));
        }
        if let Some(c) = self.clip_grad_norm {
            if c.is_nan() || c <= 0.0 {
                return bad(format!("clip_grad_norm {c} must be positive"));
            }
        }
        self.aug.validate()
    }

    /// Super-network mode additionally needs whole sub-batches.
    pub fn validate_supernet(&self) -> Result<()> {
        self.validate()?;
        if self.n_a == 0 || !self.batch_size.is_multiple_of(self.n_a) {
            return Err(Error::contract(format!("batch_size {} is not a multiple of n_a {}", self.batch_size, self.n_a)));
        }
        Ok(())
    }

    /// The last batch of an epoch may be short; every sample is visited.
    pub fn schedule(&self, samples: usize) -> Schedule {
        let spe = samples.div_ceil(self.batch_size).max(1) as u64;
        let full = self.epochs * spe;
        let total = self.max_steps.map_or(full, |m| m.min(full));
        let warmup = ((self.lr_warmup_epochs * spe as f64).round() as u64).min(total);
        Schedule { steps_per_epoch: spe, total_steps: total, warmup_steps: warmup }
    }

    /// Progress value for the architecture warmup of a run at `fraction`,
    /// rescaled so sampling covers the whole space after `warmup_fraction`.
    pub fn arch_warmup_progress(&self, fraction: f64) -> f64 {
        if self.warmup_fraction == 0.0 {
            return 1.0;
        }
        fraction / self.warmup_fraction * WARMUP_END
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate_supernet().unwrap();
        assert_eq!(TrainConfig::default().n_a, 16);
    }

    #[test]
    fn invalid_configs() {
        let c = TrainConfig { batch_size: 20, ..TrainConfig::default() };
        assert!(c.validate().is_ok() && c.validate_supernet().is_err());
        assert!(TrainConfig { drop_path_rate: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { clip_grad_norm: Some(0.0), ..TrainConfig::default() }.validate().is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
    }

    #[test]
    fn schedule_counts_the_short_batch() {
        let c = TrainConfig { epochs: 3, batch_size: 8, lr_warmup_epochs: 1.0, ..TrainConfig::default() };
        let s = c.schedule(20);
        assert_eq!((s.steps_per_epoch, s.total_steps, s.warmup_steps), (3, 9, 3));
        let capped = TrainConfig { max_steps: Some(4), ..c }.schedule(20);
        assert_eq!(capped.total_steps, 4);
    }
}
