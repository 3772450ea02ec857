//! Tape of executed operations with reverse-mode gradient propagation.
//!
//! Every operation appends one node whose operands already exist on the
//! tape, so node order is a topological order. `backward` walks the tape once
//! from the end, adding each node's contribution into its operands' gradients.

use crate::conv::{self, ConvGeometry};
use crate::error::{dim_err, Result, TensorError};
use crate::norm::{BatchMoments, BatchNormStats};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Option<Vec<T>>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SliceChannels {
        input: Var,
        start: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Channel-wise plane iteration helper: `(channel, plane slice)` over all samples.
fn planes<T>(data: &[T], c: usize, plane: usize) -> impl Iterator<Item = (usize, &[T])> {
    data.chunks_exact(plane).enumerate().map(move |(i, p)| (i % c, p))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let keep = self.requires_grad(weight);
        let (out, geom, cols) = conv::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
            keep,
        )?;
        check_finite("conv2d", &out)?;
        let mut operands = vec![input, weight];
        operands.extend(bias);
        let rg = self.any_grad(&operands);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        ))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = conv::max_pool2_forward(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::MaxPool2 { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Relu { input }))
    }

    fn norm_operands(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(dim_err("batch_norm2d", x.shape(), self.value(p).shape(), "affine parameters need one value per channel"));
            }
        }
        Ok((n, c, h * w))
    }

    fn norm_apply(&self, input: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Vec<T>) {
        let x = self.value(input);
        let c = mean.len();
        let plane = x.numel() / x.shape()[0] / c;
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(x.numel());
        let mut out = Vec::with_capacity(x.numel());
        for (ch, p) in planes(x.data(), c, plane) {
            for &v in p {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gd[ch] * h + bd[ch]);
            }
        }
        (Tensor::new(x.shape().to_vec(), out).expect("shape preserved"), xhat)
    }

    /// Batch normalization with statistics of the current batch.
    ///
    /// Returns the normalized output and the batch moments so the caller can
    /// fold them into running statistics.
    pub fn batch_norm2d_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchMoments<T>)> {
        let (n, c, plane) = self.norm_operands(input, gamma, beta)?;
        let count = n * plane;
        if count < 2 {
            return Err(TensorError::DegenerateStatistics { op: "batch_norm2d", count });
        }
        let x = self.value(input);
        let m = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        for (ch, p) in planes(x.data(), c, plane) {
            mean[ch] += p.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![T::zero(); c];
        for (ch, p) in planes(x.data(), c, plane) {
            var[ch] += p.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v /= m);
        let eps_t = T::from_f64_lossy(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let (out, xhat) = self.norm_apply(input, gamma, beta, &mean, &inv_std);
        check_finite("batch_norm2d", &out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        let v = self.push(
            out,
            rg,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, BatchMoments { mean, var, count }))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm2d_eval(&mut self, input: Var, gamma: Var, beta: Var, stats: &BatchNormStats<T>) -> Result<Var> {
        let (_, c, _) = self.norm_operands(input, gamma, beta)?;
        if stats.channels() != c {
            return Err(dim_err("batch_norm2d", self.value(input).shape(), &[stats.channels()], "running statistics width"));
        }
        let eps = T::from_f64_lossy(stats.eps);
        let inv_std: Vec<T> = stats.running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (out, xhat) = self.norm_apply(input, gamma, beta, &stats.running_mean, &inv_std);
        check_finite("batch_norm2d", &out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Train-mode normalization that also folds the batch moments into `stats`.
    pub fn batch_norm2d(&mut self, input: Var, gamma: Var, beta: Var, train: bool, stats: &mut BatchNormStats<T>) -> Result<Var> {
        if train {
            let (v, moments) = self.batch_norm2d_train(input, gamma, beta, stats.eps)?;
            stats.update(&moments)?;
            Ok(v)
        } else {
            self.batch_norm2d_eval(input, gamma, beta, stats)
        }
    }

    /// Concatenates along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, ca, ha, wa) = ta.dims4()?;
        let (nb, cb, hb, wb) = tb.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(dim_err("concat_channels", ta.shape(), tb.shape(), "batch and spatial extents must match"));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(ta.numel() + tb.numel());
        for n in 0..na {
            out.extend_from_slice(&ta.data()[n * ca * plane..(n + 1) * ca * plane]);
            out.extend_from_slice(&tb.data()[n * cb * plane..(n + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Concat { a, b }))
    }

    /// Channels `start..start+count` of an NCHW tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, count: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if count == 0 || start + count > c {
            return Err(dim_err("slice_channels", x.shape(), &[start, count], "channel range out of bounds"));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * count * plane);
        for s in 0..n {
            let base = (s * c + start) * plane;
            out.extend_from_slice(&x.data()[base..base + count * plane]);
        }
        let out = Tensor::new(vec![n, count, h, w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::SliceChannels { input, start }))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(op, ta.shape(), tb.shape(), "elementwise operands must match"));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        check_finite(op, &out)?;
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(input).sum());
        check_finite("sum", &out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(out, rg, Op::Sum { input }))
    }

    /// Back-propagates from a one-element root seeded with 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.value(root).shape().to_vec();
        if self.value(root).numel() != 1 {
            return Err(TensorError::NonScalarRoot(shape));
        }
        self.backward_from(vec![(root, Tensor::full(shape, T::one()))])
    }

    /// Back-propagates externally computed gradients of several outputs.
    ///
    /// Seeds for the same node are summed.
    pub fn backward_from(&mut self, seeds: Vec<(Var, Tensor<T>)>) -> Result<()> {
        let mut last = 0;
        for (v, g) in seeds {
            if g.shape() != self.value(v).shape() {
                return Err(dim_err("backward", self.value(v).shape(), g.shape(), "seed gradient shape"));
            }
            last = last.max(v.0 + 1);
            match &mut self.nodes[v.0].grad {
                Some(existing) => existing.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        for i in (0..last).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            if !grad.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            propagate(before, node, grad.data());
        }
        Ok(())
    }
}

/// Gradient buffer of an operand, created on first use; `None` when the operand needs no gradient.
fn grad_buf<T: Real>(nodes: &mut [Node<T>], v: Var) -> Option<&mut [T]> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let shape = node.value.shape().to_vec();
    Some(node.grad.get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
}

/// Moves an operand's gradient buffer out of the tape (zero-filled if new) so
/// operand values stay readable while it is written.
fn take_grad_buf<T: Real>(nodes: &mut [Node<T>], v: Var) -> Option<Tensor<T>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(node.grad.take().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())))
}

fn propagate<T: Real>(nodes: &mut [Node<T>], node: &Node<T>, gy: &[T]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            let mut dx = take_grad_buf(nodes, *input);
            let mut dw = take_grad_buf(nodes, *weight);
            let mut db = bias.and_then(|b| take_grad_buf(nodes, b));
            conv::conv2d_backward(
                geom,
                nodes[input.0].value.data(),
                nodes[weight.0].value.data(),
                cols.as_deref(),
                gy,
                dx.as_mut().map(|t| t.data_mut()),
                dw.as_mut().map(|t| t.data_mut()),
                db.as_mut().map(|t| t.data_mut()),
            );
            nodes[input.0].grad = dx.or(nodes[input.0].grad.take());
            nodes[weight.0].grad = dw.or(nodes[weight.0].grad.take());
            if let Some(b) = bias {
                nodes[b.0].grad = db.or(nodes[b.0].grad.take());
            }
        }
        Op::MaxPool2 { input, argmax } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                for (&idx, &g) in argmax.iter().zip(gy) {
                    dx[idx] += g;
                }
            }
        }
        Op::Relu { input } => {
            let mask: Vec<bool> = nodes[input.0].value.data().iter().map(|&v| v > T::zero()).collect();
            if let Some(dx) = grad_buf(nodes, *input) {
                for ((d, &g), m) in dx.iter_mut().zip(gy).zip(mask) {
                    if m {
                        *d += g;
                    }
                }
            }
        }
        Op::BatchNormTrain {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (c, plane) = norm_dims(&nodes[input.0].value, inv_std.len());
            let (sum_g, sum_gx) = norm_sums(gy, xhat, c, plane);
            let gd = nodes[gamma.0].value.data().to_vec();
            if let Some(dx) = grad_buf(nodes, *input) {
                let m = T::from_usize(gy.len() / c).unwrap();
                for (i, ((d, &g), &h)) in dx.iter_mut().zip(gy).zip(xhat).enumerate() {
                    let ch = (i / plane) % c;
                    *d += gd[ch] * inv_std[ch] / m * (m * g - sum_g[ch] - h * sum_gx[ch]);
                }
            }
            add_into(grad_buf(nodes, *gamma), &sum_gx);
            add_into(grad_buf(nodes, *beta), &sum_g);
        }
        Op::BatchNormEval {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (c, plane) = norm_dims(&nodes[input.0].value, inv_std.len());
            let (sum_g, sum_gx) = norm_sums(gy, xhat, c, plane);
            let gd = nodes[gamma.0].value.data().to_vec();
            if let Some(dx) = grad_buf(nodes, *input) {
                for (i, (d, &g)) in dx.iter_mut().zip(gy).enumerate() {
                    let ch = (i / plane) % c;
                    *d += g * gd[ch] * inv_std[ch];
                }
            }
            add_into(grad_buf(nodes, *gamma), &sum_gx);
            add_into(grad_buf(nodes, *beta), &sum_g);
        }
        Op::Concat { a, b } => {
            let shape = node.value.shape();
            let (n, plane) = (shape[0], shape[2] * shape[3]);
            let ca = nodes[a.0].value.shape()[1];
            let cb = nodes[b.0].value.shape()[1];
            if let Some(da) = grad_buf(nodes, *a) {
                for s in 0..n {
                    let src = &gy[s * (ca + cb) * plane..][..ca * plane];
                    add_into(Some(&mut da[s * ca * plane..(s + 1) * ca * plane]), src);
                }
            }
            if let Some(db) = grad_buf(nodes, *b) {
                for s in 0..n {
                    let src = &gy[(s * (ca + cb) + ca) * plane..][..cb * plane];
                    add_into(Some(&mut db[s * cb * plane..(s + 1) * cb * plane]), src);
                }
            }
        }
        Op::SliceChannels { input, start } => {
            let (n, count, h, w) = node.value.dims4().unwrap();
            let c = nodes[input.0].value.shape()[1];
            let plane = h * w;
            if let Some(dx) = grad_buf(nodes, *input) {
                for s in 0..n {
                    let dst = &mut dx[(s * c + start) * plane..][..count * plane];
                    add_into(Some(dst), &gy[s * count * plane..(s + 1) * count * plane]);
                }
            }
        }
        Op::Add { a, b } => {
            add_into(grad_buf(nodes, *a), gy);
            add_into(grad_buf(nodes, *b), gy);
        }
        Op::Mul { a, b } => {
            let va = nodes[a.0].value.data().to_vec();
            let vb = nodes[b.0].value.data().to_vec();
            if let Some(da) = grad_buf(nodes, *a) {
                for ((d, &g), &y) in da.iter_mut().zip(gy).zip(&vb) {
                    *d += g * y;
                }
            }
            if let Some(db) = grad_buf(nodes, *b) {
                for ((d, &g), &x) in db.iter_mut().zip(gy).zip(&va) {
                    *d += g * x;
                }
            }
        }
        Op::Sum { input } => {
            if let Some(dx) = grad_buf(nodes, *input) {
                dx.iter_mut().for_each(|d| *d += gy[0]);
            }
        }
    }
}

fn add_into<T: Real>(dst: Option<&mut [T]>, src: &[T]) {
    if let Some(dst) = dst {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    }
}

fn norm_dims<T: Real>(x: &Tensor<T>, c: usize) -> (usize, usize) {
    (c, x.numel() / x.shape()[0] / c)
}

/// Per-channel `Σ dy` and `Σ dy·x̂`.
fn norm_sums<T: Real>(gy: &[T], xhat: &[T], c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for (i, (gp, hp)) in gy.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
        let ch = i % c;
        for (&g, &h) in gp.iter().zip(hp) {
            sum_g[ch] += g;
            sum_gx[ch] += g * h;
        }
    }
    (sum_g, sum_gx)
}
