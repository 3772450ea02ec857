use crate::error::{dim_err, Result};
use crate::real::Real;

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Per-channel mean and biased variance of one training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// Elements per channel (`N·H·W`).
    pub count: usize,
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        Self::with_params(channels, DEFAULT_BN_MOMENTUM, DEFAULT_BN_EPS)
    }

    pub fn with_params(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average update; the variance is folded in unbiased.
    pub fn update(&mut self, m: &BatchMoments<T>) -> Result<()> {
        if m.mean.len() != self.channels() {
            return Err(dim_err("batch_norm2d", &[self.channels()], &[m.mean.len()], "running statistics width"));
        }
        let mom = T::from_f64_lossy(self.momentum);
        let keep = T::one() - mom;
        let unbias = T::from_f64_lossy(m.count as f64 / (m.count as f64 - 1.0));
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + mom * m.mean[c];
            self.running_var[c] = keep * self.running_var[c] + mom * m.var[c] * unbias;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> BatchNormStats<U> {
        BatchNormStats {
            running_mean: self.running_mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            running_var: self.running_var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}
