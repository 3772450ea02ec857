//! Central finite-difference gradient checks (64-bit only).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::norm::BatchNormStats;
use crate::tensor::Tensor;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest [`relative_error`] over paired coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn numeric_gradient(mut f: impl FnMut(&Tensor<f64>) -> Result<f64>, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TensorError::NonFinite { op: "finite_difference" });
        }
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Compares the tape gradient of a scalar graph function against central differences.
///
/// `f` receives a fresh graph and the leaf holding `x`, and returns the scalar output.
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let root = f(&mut g, leaf)?;
    g.backward(root)?;
    let analytic = g
        .take_grad(leaf)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let numeric = numeric_gradient(
        |probe| {
            let mut g = Graph::new();
            let leaf = g.leaf(probe.clone(), false);
            let root = f(&mut g, leaf)?;
            Ok(g.value(root).data()[0])
        },
        x,
        h,
    )?;
    Ok(max_relative_error(analytic.data(), numeric.data()))
}

/// Result of checking one primitive with respect to one operand.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveCheck {
    pub name: String,
    pub max_rel_error: f64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Magnitudes in `[0.05, 1]`, keeping ReLU inputs clear of the kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values at least 0.01 apart, so every pooling window has a clear maximum.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    values.shuffle(rng);
    Tensor::new(shape.to_vec(), values).expect("matching length")
}

/// Contracts `y` with a fixed random tensor so every output element matters.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.leaf(r.clone(), false);
    let z = g.mul(y, rv)?;
    g.sum(z)
}

/// Central-difference checks of every differentiable primitive with respect to each operand.
pub fn primitive_suite(seed: u64, h: f64) -> Result<Vec<PrimitiveCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |name: &str, err: Result<f64>| -> Result<()> {
        out.push(PrimitiveCheck {
            name: name.to_string(),
            max_rel_error: err?,
        });
        Ok(())
    };

    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (1, 2, 5)] {
        let x = uniform(&mut rng, &[2, 3, 7, 7]);
        let w = uniform(&mut rng, &[4, 3, k, k]);
        let b = uniform(&mut rng, &[4]);
        let e = (7 + 2 * pad - k) / stride + 1;
        let r = uniform(&mut rng, &[2, 4, e, e]);
        for which in 0..3 {
            let f = |g: &mut Graph<f64>, v: Var| {
                let xv = if which == 0 { v } else { g.leaf(x.clone(), false) };
                let wv = if which == 1 { v } else { g.leaf(w.clone(), false) };
                let bv = if which == 2 { v } else { g.leaf(b.clone(), false) };
                let y = g.conv2d(xv, wv, Some(bv), stride, pad)?;
                project(g, y, &r)
            };
            let operand = ["input", "weight", "bias"][which];
            let err = finite_difference_check(f, [&x, &w, &b][which], h);
            push(&format!("conv2d k{k} s{stride} p{pad} / {operand}"), err)?;
        }
    }

    let x = distinct(&mut rng, &[2, 2, 6, 6]);
    let r = uniform(&mut rng, &[2, 2, 3, 3]);
    let err = finite_difference_check(
        |g, v| {
            let y = g.max_pool2d(v)?;
            project(g, y, &r)
        },
        &x,
        h,
    );
    push("max_pool2d / input", err)?;

    let x = off_kink(&mut rng, &[2, 3, 4, 4]);
    let r = uniform(&mut rng, &[2, 3, 4, 4]);
    let err = finite_difference_check(
        |g, v| {
            let y = g.relu(v)?;
            project(g, y, &r)
        },
        &x,
        h,
    );
    push("relu / input", err)?;

    let x = uniform(&mut rng, &[3, 2, 4, 4]);
    let gamma = uniform(&mut rng, &[2]);
    let beta = uniform(&mut rng, &[2]);
    let r = uniform(&mut rng, &[3, 2, 4, 4]);
    let stats = BatchNormStats {
        running_mean: vec![0.1, -0.2],
        running_var: vec![0.8, 1.3],
        momentum: 0.1,
        eps: 1e-5,
    };
    for train in [true, false] {
        for which in 0..3 {
            let f = |g: &mut Graph<f64>, v: Var| {
                let xv = if which == 0 { v } else { g.leaf(x.clone(), false) };
                let gv = if which == 1 { v } else { g.leaf(gamma.clone(), false) };
                let bv = if which == 2 { v } else { g.leaf(beta.clone(), false) };
                let y = g.batch_norm2d(xv, gv, bv, train, &mut stats.clone())?;
                project(g, y, &r)
            };
            let mode = if train { "train" } else { "eval" };
            let operand = ["input", "gamma", "beta"][which];
            push(&format!("batch_norm2d {mode} / {operand}"), finite_difference_check(f, [&x, &gamma, &beta][which], h))?;
        }
    }

    let a = uniform(&mut rng, &[2, 2, 3, 3]);
    let b = uniform(&mut rng, &[2, 3, 3, 3]);
    let r = uniform(&mut rng, &[2, 3, 3, 3]);
    for first in [true, false] {
        let f = |g: &mut Graph<f64>, v: Var| {
            let (av, bv) = if first {
                (v, g.leaf(b.clone(), false))
            } else {
                (g.leaf(a.clone(), false), v)
            };
            let c = g.concat_channels(av, bv)?;
            let s = g.slice_channels(c, 1, 3)?;
            project(g, s, &r)
        };
        let operand = if first { "first" } else { "second" };
        push(&format!("concat+slice / {operand}"), finite_difference_check(f, if first { &a } else { &b }, h))?;
    }

    let a = uniform(&mut rng, &[2, 5]);
    let b = uniform(&mut rng, &[2, 5]);
    let f = |g: &mut Graph<f64>, v: Var| {
        let bv = g.leaf(b.clone(), false);
        let s = g.add(v, bv)?;
        let p = g.mul(s, v)?;
        g.sum(p)
    };
    push("add+mul+sum / input", finite_difference_check(f, &a, h))?;
    Ok(out)
}
