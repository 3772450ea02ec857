use std::fmt;

use rpose_tensor::Real;

use super::config::{ModelConfig, LAYERS, OUTPUT_STRIDE};
use super::network::{ConvLayer, PoseNet};

/// Parameter count of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `in · kh · kw · out`.
    pub weights: usize,
    pub biases: usize,
    /// Batch-norm scale and shift.
    pub norm: usize,
}

impl LayerParams {
    pub fn conv(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, bias: bool) -> Self {
        Self {
            name: name.into(),
            in_channels: cin,
            out_channels: cout,
            kernel,
            weights: cin * kernel * kernel * cout,
            biases: if bias { cout } else { 0 },
            norm: 0,
        }
    }

    pub fn with_norm(mut self) -> Self {
        self.norm = 2 * self.out_channels;
        self
    }

    pub fn total(&self) -> usize {
        self.weights + self.biases + self.norm
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub layers: Vec<LayerParams>,
    pub total: usize,
}

impl ParamReport {
    pub fn from_layers(layers: Vec<LayerParams>) -> Self {
        let total = layers.iter().map(LayerParams::total).sum();
        Self { layers, total }
    }

    /// Closed-form count for a configuration, without building the model.
    pub fn for_config(cfg: &ModelConfig) -> Self {
        let mut layers = Vec::new();
        for l in 1..=LAYERS {
            let k = cfg.kernel_size(l);
            let p = LayerParams::conv(format!("layer{l}"), cfg.in_channels(l), cfg.channels[l - 1], k, k == 1);
            layers.push(if k > 1 { p.with_norm() } else { p });
        }
        let out = cfg.heads_channels();
        layers.push(LayerParams::conv("head_aux", cfg.channels[4], out, 1, true));
        layers.push(LayerParams::conv("head", cfg.channels[6], out, 1, true));
        Self::from_layers(layers)
    }

    pub fn weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights).sum()
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>5} {:>5} {:>7} {:>12} {:>7} {:>7} {:>12}", "layer", "in", "out", "kernel", "weights", "bias", "norm", "total")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<10} {:>5} {:>5} {:>7} {:>12} {:>7} {:>7} {:>12}",
                l.name,
                l.in_channels,
                l.out_channels,
                format!("{0}x{0}", l.kernel),
                l.weights,
                l.biases,
                l.norm,
                l.total()
            )?;
        }
        write!(f, "total: {} ({:.2}M)", self.total, self.total as f64 / 1e6)
    }
}

/// Counts the tensors the model actually holds; shared weights are counted once.
pub fn count_parameters<T: Real>(model: &PoseNet<T>) -> ParamReport {
    let row = |name: String, c: &ConvLayer<T>| {
        let s = c.weight.shape();
        LayerParams::conv(name, s[1], s[0], s[2], c.bias.is_some())
    };
    let mut layers = Vec::new();
    for (i, b) in model.blocks.iter().enumerate() {
        let mut p = row(format!("layer{}", i + 1), &b.conv);
        if let Some(n) = &b.norm {
            p.norm = n.gamma.numel() + n.beta.numel();
        }
        layers.push(p);
    }
    layers.push(row("head_aux".into(), &model.head_aux));
    layers.push(row("head".into(), &model.head));
    ParamReport::from_layers(layers)
}

/// One spatial stage for receptive-field composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RfLayer {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl RfLayer {
    pub fn same_conv(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
        }
    }

    pub fn pool2() -> Self {
        Self {
            kernel: 2,
            stride: 2,
            padding: 0,
        }
    }
}

/// Receptive field of an output unit of a layer stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReceptiveField {
    pub size: usize,
    /// Input pixels between adjacent output units.
    pub jump: usize,
    /// Input coordinate of the centre of output unit 0.
    pub start: f64,
}

impl ReceptiveField {
    /// Inclusive input-pixel range seen by output unit `u`, along one axis, before clipping.
    pub fn span(&self, u: usize) -> (f64, f64) {
        let centre = self.start + (u * self.jump) as f64;
        let half = (self.size as f64 - 1.0) / 2.0;
        (centre - half, centre + half)
    }

    /// Clipped inclusive index range for unit `u` in an input of length `len`.
    pub fn clipped(&self, u: usize, len: usize) -> (usize, usize) {
        let (lo, hi) = self.span(u);
        let lo = lo.ceil().max(0.0) as usize;
        let hi = (hi.floor() as isize).clamp(0, len as isize - 1) as usize;
        (lo, hi)
    }
}

pub fn compose(layers: &[RfLayer]) -> ReceptiveField {
    let mut rf = ReceptiveField {
        size: 1,
        jump: 1,
        start: 0.0,
    };
    for l in layers {
        rf.size += (l.kernel - 1) * rf.jump;
        rf.start += ((l.kernel as f64 - 1.0) / 2.0 - l.padding as f64) * rf.jump as f64;
        rf.jump *= l.stride;
    }
    rf
}

/// Stages from the input to a head that follows `traversals` runs of Layers 6–7.
///
/// `traversals = 0` is the pre-fusion head; a model run with `T` recurrent
/// passes has its final head at `traversals = T + 1`.
pub fn deepest_path(cfg: &ModelConfig, traversals: usize) -> Vec<RfLayer> {
    let mut path = vec![
        RfLayer::same_conv(cfg.kernel_size(1)),
        RfLayer::pool2(),
        RfLayer::same_conv(cfg.kernel_size(2)),
        RfLayer::pool2(),
        RfLayer::same_conv(cfg.kernel_size(3)),
        RfLayer::same_conv(cfg.kernel_size(4)),
        RfLayer::same_conv(cfg.kernel_size(5)),
    ];
    for _ in 0..traversals {
        path.push(RfLayer::same_conv(cfg.kernel_size(6)));
        path.push(RfLayer::same_conv(cfg.kernel_size(7)));
    }
    path.push(RfLayer::same_conv(1));
    debug_assert_eq!(compose(&path).jump, OUTPUT_STRIDE);
    path
}

pub fn receptive_field_of(cfg: &ModelConfig, traversals: usize) -> ReceptiveField {
    compose(&deepest_path(cfg, traversals))
}

/// Receptive-field side in input pixels of a head unit after `traversals` fusion passes.
pub fn receptive_field(cfg: &ModelConfig, traversals: usize) -> usize {
    receptive_field_of(cfg, traversals).size
}
