//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{dim_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Velocity buffers plus hyper-parameters.
///
/// `v ← momentum·v + g`, then `p ← p − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    /// Zero velocity for parameters of the given shapes.
    pub fn new<'a>(learning_rate: f64, momentum: f64, shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        assert!(learning_rate >= 0.0, "learning rate must be non-negative");
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1)");
        Self {
            learning_rate,
            momentum,
            velocity: shapes.into_iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// Replaces the velocity buffers, e.g. when resuming from a checkpoint.
    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) -> Result<()> {
        for (old, new) in self.velocity.iter().zip(&velocity) {
            if old.shape() != new.shape() {
                return Err(dim_err("sgd", old.shape(), new.shape(), "velocity shape"));
            }
        }
        if velocity.len() != self.velocity.len() {
            return Err(dim_err("sgd", &[self.velocity.len()], &[velocity.len()], "velocity count"));
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(dim_err(
                "sgd",
                &[self.velocity.len()],
                &[params.len(), grads.len()],
                "parameter, gradient and velocity counts differ",
            ));
        }
        let lr = T::from_f64_lossy(self.learning_rate);
        let mom = T::from_f64_lossy(self.momentum);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(dim_err("sgd", p.shape(), g.shape(), "parameter and gradient shapes differ"));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = mom * *vv + gv;
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor<f64> {
        Tensor::scalar(v)
    }

    #[test]
    fn plain_step() {
        let mut p = one(0.0);
        let mut sgd = Sgd::new(0.1, 0.0, [p.shape()]);
        sgd.step(&mut [&mut p], &[&one(1.0)]).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = Tensor::from_fn(vec![3], |i| i as f64);
        let before = p.clone();
        let mut sgd = Sgd::new(0.5, 0.95, [p.shape()]);
        sgd.step(&mut [&mut p], &[&Tensor::zeros(vec![3])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = one(0.0);
        let mut sgd = Sgd::new(1.0, 0.95, [p.shape()]);
        for _ in 0..2 {
            sgd.step(&mut [&mut p], &[&one(1.0)]).unwrap();
        }
        // v1 = 1, v2 = 1.95: p = -(1 + 1.95)
        assert!((p.data()[0] + 2.95).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f64>::zeros(vec![2]);
        let mut sgd = Sgd::new(1.0, 0.0, [p.shape()]);
        assert!(sgd.step(&mut [&mut p], &[&Tensor::zeros(vec![3])]).is_err());
    }
}
