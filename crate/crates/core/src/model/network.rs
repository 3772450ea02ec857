use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rpose_tensor::{BatchMoments, BatchNormStats, Graph, Real, Tensor, TensorError, Var};

use super::config::{ModelConfig, LAYERS};
use crate::error::{Error, Result};

/// Convolution weights; `bias` is absent when batch norm follows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Real> ConvLayer<T> {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, with_bias: bool) -> Self {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let weight = Tensor::from_fn([cout, cin, k, k], |_| T::from_f64_lossy(normal.sample(rng)));
        Self {
            weight,
            bias: with_bias.then(|| Tensor::zeros([cout])),
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormLayer<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BatchNormStats<T>,
}

/// Conv, optional batch norm, then ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub conv: ConvLayer<T>,
    pub norm: Option<NormLayer<T>>,
}

/// Predicted heatmaps of every head, `N × (K+P) × h × w` each.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T> {
    /// Head on the Layer-5 path, before fusion.
    pub head_aux: Tensor<T>,
    /// Fusion passes 0 through T.
    pub per_pass: Vec<Tensor<T>>,
}

impl<T> HeadOutputs<T> {
    pub fn final_head(&self) -> &Tensor<T> {
        self.per_pass.last().expect("at least one fusion pass")
    }

    /// `head_aux` followed by the per-pass heads.
    pub fn all(&self) -> Vec<&Tensor<T>> {
        std::iter::once(&self.head_aux).chain(&self.per_pass).collect()
    }
}

/// Graph handles produced by [`PoseNet::forward_graph`].
#[derive(Debug)]
pub struct ForwardVars<T> {
    /// One leaf per trainable tensor, in [`PoseNet::param_names`] order.
    pub params: Vec<Var>,
    /// `head_aux`, then pass 0 through T.
    pub heads: Vec<Var>,
    /// Batch moments per normalized block (block index, moments), in execution order.
    pub moments: Vec<(usize, BatchMoments<T>)>,
}

/// The recurrent heatmap network.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet<T> {
    cfg: ModelConfig,
    pub blocks: Vec<Block<T>>,
    pub head_aux: ConvLayer<T>,
    /// Shared by every fusion pass.
    pub head: ConvLayer<T>,
    /// Per-channel RGB mean subtracted from inputs before the forward pass.
    pub input_mean: [f64; 3],
}

struct BlockVars {
    w: Var,
    b: Option<Var>,
    norm: Option<(Var, Var)>,
}

struct HeadVars {
    w: Var,
    b: Option<Var>,
}

impl<T: Real> PoseNet<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(LAYERS);
        for layer in 1..=LAYERS {
            let k = cfg.kernel_size(layer);
            let cout = cfg.channels[layer - 1];
            let normalized = k > 1;
            let conv = ConvLayer::init(&mut rng, cfg.in_channels(layer), cout, k, !normalized);
            let norm = normalized.then(|| NormLayer {
                gamma: Tensor::full([cout], T::one()),
                beta: Tensor::zeros([cout]),
                stats: BatchNormStats::with_params(cout, cfg.bn_momentum, cfg.bn_eps),
            });
            blocks.push(Block { conv, norm });
        }
        let out = cfg.heads_channels();
        let head_aux = ConvLayer::init(&mut rng, cfg.channels[4], out, 1, true);
        let head = ConvLayer::init(&mut rng, cfg.channels[6], out, 1, true);
        Ok(Self {
            cfg,
            blocks,
            head_aux,
            head,
            input_mean: [0.0; 3],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Changes the default number of recurrent passes; weights are unaffected.
    pub fn set_iterations(&mut self, iterations: usize) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.iterations = iterations;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let l = i + 1;
            names.push(format!("layer{l}.weight"));
            if b.conv.bias.is_some() {
                names.push(format!("layer{l}.bias"));
            }
            if b.norm.is_some() {
                names.push(format!("layer{l}.bn.gamma"));
                names.push(format!("layer{l}.bn.beta"));
            }
        }
        for h in ["head_aux", "head"] {
            names.push(format!("{h}.weight"));
            names.push(format!("{h}.bias"));
        }
        names
    }

    /// Trainable tensors in [`Self::param_names`] order.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.conv.weight);
            out.extend(b.conv.bias.as_ref());
            if let Some(n) = &b.norm {
                out.push(&n.gamma);
                out.push(&n.beta);
            }
        }
        for h in [&self.head_aux, &self.head] {
            out.push(&h.weight);
            out.extend(h.bias.as_ref());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv.weight);
            out.extend(b.conv.bias.as_mut());
            if let Some(n) = &mut b.norm {
                out.push(&mut n.gamma);
                out.push(&mut n.beta);
            }
        }
        for h in [&mut self.head_aux, &mut self.head] {
            out.push(&mut h.weight);
            out.extend(h.bias.as_mut());
        }
        out
    }

    pub fn bn_stats(&self) -> Vec<(usize, &BatchNormStats<T>)> {
        self.blocks
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.norm.as_ref().map(|n| (i, &n.stats)))
            .collect()
    }

    pub fn bn_stats_mut(&mut self) -> Vec<(usize, &mut BatchNormStats<T>)> {
        self.blocks
            .iter_mut()
            .enumerate()
            .filter_map(|(i, b)| b.norm.as_mut().map(|n| (i, &mut n.stats)))
            .collect()
    }

    /// Folds training-mode batch moments into the running statistics, in order.
    pub fn apply_moments(&mut self, moments: &[(usize, BatchMoments<T>)]) -> Result<()> {
        for (i, m) in moments {
            let norm = self.blocks[*i]
                .norm
                .as_mut()
                .ok_or_else(|| Error::Contract(format!("layer {} has no batch norm", i + 1)))?;
            norm.stats.update(m)?;
        }
        Ok(())
    }

    fn resolve_passes(&self, passes: Option<usize>) -> Result<usize> {
        let t = passes.unwrap_or(self.cfg.iterations);
        if t > self.cfg.max_iterations {
            return Err(Error::Config(format!(
                "{t} recurrent passes requested, max_iterations is {}",
                self.cfg.max_iterations
            )));
        }
        Ok(t)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            let n = shape.first().copied().unwrap_or(1);
            return Err(TensorError::Dimension {
                op: "forward",
                lhs: shape.to_vec(),
                rhs: vec![n, 3, s, s],
                detail: "input must be N×3×S×S at the configured size".into(),
            }
            .into());
        }
        Ok(())
    }

    /// Builds the network on `g` from an already-normalized input batch.
    ///
    /// With `train` set, batch norm uses batch statistics and the returned
    /// moments should be passed to [`Self::apply_moments`] after the step;
    /// otherwise running statistics are used and parameters are constants.
    pub fn forward_graph(&self, g: &mut Graph<T>, images: Var, train: bool, passes: Option<usize>) -> Result<ForwardVars<T>> {
        self.check_input(g.value(images).shape())?;
        let passes = self.resolve_passes(passes)?;
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph<T>, t: &Tensor<T>| {
            let v = g.leaf(t.clone(), train);
            params.push(v);
            v
        };
        let block_vars: Vec<BlockVars> = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                w: leaf(g, &b.conv.weight),
                b: b.conv.bias.as_ref().map(|t| leaf(g, t)),
                norm: b.norm.as_ref().map(|n| (leaf(g, &n.gamma), leaf(g, &n.beta))),
            })
            .collect();
        let head_vars: Vec<HeadVars> = [&self.head_aux, &self.head]
            .iter()
            .map(|h| HeadVars {
                w: leaf(g, &h.weight),
                b: h.bias.as_ref().map(|t| leaf(g, t)),
            })
            .collect();

        let mut moments = Vec::new();
        let mut run = |g: &mut Graph<T>, i: usize, x: Var| -> Result<Var> {
            let b = &self.blocks[i];
            let v = &block_vars[i];
            let pad = (b.conv.kernel() - 1) / 2;
            let mut y = g.conv2d(x, v.w, v.b, 1, pad)?;
            if let (Some(norm), Some((gamma, beta))) = (&b.norm, v.norm) {
                y = if train {
                    let (y, m) = g.batch_norm2d_train(y, gamma, beta, norm.stats.eps)?;
                    moments.push((i, m));
                    y
                } else {
                    g.batch_norm2d_eval(y, gamma, beta, &norm.stats)?
                };
            }
            Ok(g.relu(y)?)
        };
        let head = |g: &mut Graph<T>, h: &HeadVars, x: Var| -> Result<Var> {
            let y = g.conv2d(x, h.w, h.b, 1, 0)?;
            Ok(g.relu(y)?)
        };

        let x = run(g, 0, images)?;
        let x = g.max_pool2d(x)?;
        let x = run(g, 1, x)?;
        let x = g.max_pool2d(x)?;
        let feat3 = run(g, 2, x)?;
        let x = run(g, 3, feat3)?;
        let mut context = run(g, 4, x)?;
        let mut heads = vec![head(g, &head_vars[0], context)?];
        for _ in 0..=passes {
            let fused = g.concat_channels(feat3, context)?;
            let x = run(g, 5, fused)?;
            context = run(g, 6, x)?;
            heads.push(head(g, &head_vars[1], context)?);
        }
        Ok(ForwardVars { params, heads, moments })
    }

    /// Subtracts [`Self::input_mean`] per channel.
    pub fn normalize_input(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let plane = self.cfg.input_size * self.cfg.input_size;
        let mean: Vec<T> = self.input_mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let mut out = images.clone();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let m = mean[i % 3];
            chunk.iter_mut().for_each(|v| *v -= m);
        }
        Ok(out)
    }

    /// Eval-mode forward on an already-normalized batch.
    pub fn forward(&self, images: &Tensor<T>, passes: Option<usize>) -> Result<HeadOutputs<T>> {
        let mut g = Graph::new();
        let x = g.leaf(images.clone(), false);
        let fv = self.forward_graph(&mut g, x, false, passes)?;
        let mut heads = fv.heads.iter().map(|&h| g.value(h).clone());
        let head_aux = heads.next().expect("aux head");
        Ok(HeadOutputs {
            head_aux,
            per_pass: heads.collect(),
        })
    }

    /// Eval-mode forward on raw pixels: normalizes, then runs [`Self::forward`].
    pub fn predict(&self, images: &Tensor<T>, passes: Option<usize>) -> Result<HeadOutputs<T>> {
        self.forward(&self.normalize_input(images)?, passes)
    }

    pub fn cast<U: Real>(&self) -> PoseNet<U> {
        let conv = |c: &ConvLayer<T>| ConvLayer {
            weight: c.weight.cast(),
            bias: c.bias.as_ref().map(|b| b.cast()),
        };
        PoseNet {
            cfg: self.cfg.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    conv: conv(&b.conv),
                    norm: b.norm.as_ref().map(|n| NormLayer {
                        gamma: n.gamma.cast(),
                        beta: n.beta.cast(),
                        stats: n.stats.cast(),
                    }),
                })
                .collect(),
            head_aux: conv(&self.head_aux),
            head: conv(&self.head),
            input_mean: self.input_mean,
        }
    }
}
