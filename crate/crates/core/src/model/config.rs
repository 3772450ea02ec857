use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervision::OcclusionScenario;

/// Number of convolutional layers before the prediction heads.
pub const LAYERS: usize = 7;
/// Kernel size of Layers 1–3.
pub const SMALL_KERNEL: usize = 3;
/// Input pixels per heatmap cell (two 2× poolings).
pub const OUTPUT_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Full,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }
}

/// Shape of the network.
///
/// `channels[i]` is the output width of Layer `i+1`. Layer 7 must match
/// Layer 5 because both feed the fusion input next to the Layer-3 features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    pub input_size: usize,
    pub keypoints: usize,
    pub parts: usize,
    /// Recurrent passes used in training (`T`); pass 0 is the first fusion pass.
    pub iterations: usize,
    /// Upper bound accepted for a forward-time override of `iterations`.
    pub max_iterations: usize,
    pub channels: Vec<usize>,
    /// Kernel size of Layers 4 and 6.
    pub large_kernel: usize,
    pub scenario: OcclusionScenario,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl ModelConfig {
    /// 64×64 input, narrow channels, small enough to train on one core.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            input_size: 64,
            keypoints: 14,
            parts: 13,
            iterations: 2,
            max_iterations: 8,
            channels: vec![16, 24, 32, 32, 32, 32, 32],
            large_kernel: 7,
            scenario: OcclusionScenario::Include,
            bn_eps: rpose_tensor::norm::DEFAULT_BN_EPS,
            bn_momentum: rpose_tensor::norm::DEFAULT_BN_MOMENTUM,
        }
    }

    /// 248×248 input with 13×13 context kernels, about 15.4M parameters.
    pub fn full() -> Self {
        Self {
            preset: Preset::Full,
            input_size: 248,
            keypoints: 16,
            parts: 13,
            iterations: 2,
            max_iterations: 8,
            channels: vec![64, 128, 128, 232, 128, 232, 128],
            large_kernel: 13,
            scenario: OcclusionScenario::Include,
            bn_eps: rpose_tensor::norm::DEFAULT_BN_EPS,
            bn_momentum: rpose_tensor::norm::DEFAULT_BN_MOMENTUM,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn heads_channels(&self) -> usize {
        self.keypoints + self.parts
    }

    pub fn heatmap_size(&self) -> usize {
        self.input_size / OUTPUT_STRIDE
    }

    /// Kernel size of Layer `layer` (1-based).
    pub fn kernel_size(&self, layer: usize) -> usize {
        match layer {
            1..=3 => SMALL_KERNEL,
            4 | 6 => self.large_kernel,
            5 | 7 => 1,
            _ => panic!("layer {layer} out of range"),
        }
    }

    /// Input width of Layer `layer` (1-based).
    pub fn in_channels(&self, layer: usize) -> usize {
        match layer {
            1 => 3,
            6 => self.channels[2] + self.channels[4],
            l => self.channels[l - 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.input_size % OUTPUT_STRIDE != 0 {
            return fail(format!("input_size {} must be a positive multiple of {OUTPUT_STRIDE}", self.input_size));
        }
        if self.keypoints == 0 {
            return fail("keypoints must be positive".into());
        }
        if self.channels.len() != LAYERS || self.channels.contains(&0) {
            return fail(format!("channels must list {LAYERS} positive widths, got {:?}", self.channels));
        }
        if self.channels[6] != self.channels[4] {
            return fail(format!(
                "layer 7 width {} must equal layer 5 width {}: both are concatenated with layer 3 as the fusion input",
                self.channels[6], self.channels[4]
            ));
        }
        if self.large_kernel < 5 || self.large_kernel % 2 == 0 {
            return fail(format!("large_kernel must be odd and at least 5, got {}", self.large_kernel));
        }
        if self.iterations > self.max_iterations {
            return fail(format!(
                "iterations {} exceeds max_iterations {}",
                self.iterations, self.max_iterations
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return fail("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }

    /// Canonical TOML text (keys sorted).
    pub fn to_text(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        toml::to_string(&value).expect("config serializes")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::full().validate().unwrap();
        assert!(ModelConfig::desk().channels.iter().all(|&c| c <= 32));
    }

    #[test]
    fn inconsistent_channel_plan_is_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.channels[6] = cfg.channels[4] + 1;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_and_size_rules() {
        let mut cfg = ModelConfig::desk();
        cfg.input_size = 66;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.large_kernel = 4;
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig::full();
        assert_eq!(
            (1..=7).map(|l| cfg.kernel_size(l)).collect::<Vec<_>>(),
            vec![3, 3, 3, 13, 1, 13, 1]
        );
    }

    #[test]
    fn text_is_key_sorted_and_round_trips() {
        let cfg = ModelConfig::full();
        let text = cfg.to_text();
        let keys: Vec<&str> = text.lines().filter_map(|l| l.split(" = ").next()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(ModelConfig::from_text(&text).unwrap(), cfg);
    }
}
