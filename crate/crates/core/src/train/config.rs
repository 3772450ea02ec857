use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::supervision::OcclusionScenario;

/// Optimization hyper-parameters of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the first epoch.
    pub lr_start: f64,
    /// Learning rate of the last epoch; intermediate epochs interpolate geometrically.
    pub lr_end: f64,
    pub momentum: f64,
    pub seed: u64,
    pub scenario: OcclusionScenario,
    /// Validate and checkpoint every this many epochs; 0 only at the end.
    pub eval_every: usize,
    /// Stop once this many optimizer steps have been taken in total.
    pub max_steps: Option<usize>,
    /// Rescale the gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    pub augment: Option<AugmentConfig>,
    /// Print one line per epoch to standard error.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 20,
            lr_start: 1e-5,
            lr_end: 1e-6,
            momentum: 0.95,
            seed: 0,
            scenario: OcclusionScenario::Include,
            eval_every: 1,
            max_steps: None,
            clip_norm: None,
            augment: None,
            progress: false,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale model; the step size is larger because the
    /// balanced loss keeps gradients small at this resolution.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            lr_start: DESK_LR_START,
            lr_end: DESK_LR_END,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Config(format!("train: {msg}")));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0 && self.lr_start.is_finite()) {
            return fail("learning rates must be finite and non-negative");
        }
        if self.lr_end > self.lr_start {
            return fail("lr_end must not exceed lr_start");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail("momentum must lie in [0, 1)");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail("clip_norm must be positive");
            }
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 || self.lr_start == self.lr_end {
            return self.lr_start;
        }
        if self.lr_end == 0.0 {
            return if epoch + 1 >= self.epochs { 0.0 } else { self.lr_start };
        }
        let t = (epoch.min(self.epochs - 1)) as f64 / (self.epochs - 1) as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

pub const DESK_LR_START: f64 = 3e-2;
pub const DESK_LR_END: f64 = 3e-3;
