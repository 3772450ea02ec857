//! Run configuration: a TOML file with `[model]`, `[train]`, `[data]`,
//! `[generate]` and `[eval]` sections, layered over preset defaults.

use std::path::{Path, PathBuf};

use rpose_core::model::{ModelConfig, Preset};
use rpose_core::supervision::SkeletonSpec;
use rpose_core::train::{EvalOptions, TrainConfig};
use rpose_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Network shape: a preset plus optional overrides. Keypoint and part counts
/// come from the skeleton.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    pub input_size: Option<usize>,
    pub iterations: Option<usize>,
    pub max_iterations: Option<usize>,
    pub channels: Option<Vec<usize>>,
    pub large_kernel: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            input_size: None,
            iterations: None,
            max_iterations: None,
            channels: None,
            large_kernel: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `lsp14`, `mpii16` or a path to a skeleton TOML file.
    pub skeleton: String,
    /// Annotation file (or dataset directory) to train on; synthesized from `[generate]` when absent.
    pub train: Option<PathBuf>,
    /// Validation annotations; otherwise the last `holdout` training samples.
    pub val: Option<PathBuf>,
    pub holdout: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            skeleton: "lsp14".into(),
            train: None,
            val: None,
            holdout: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub count: usize,
    pub occlusion_rate: f64,
    pub distractor_prob: f64,
    pub seed: u64,
    /// Image side; the model input size when absent.
    pub size: Option<usize>,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            count: 200,
            occlusion_rate: 0.3,
            distractor_prob: rpose_core::data::DISTRACTOR_PROB,
            seed: 0,
            size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub alpha: f64,
    pub torso_alpha: f64,
    /// Average heatmaps over input scales 0.9, 1.0 and 1.1.
    pub scale_augmentation: bool,
    pub passes: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let d = EvalOptions::default();
        Self {
            alpha: d.alpha,
            torso_alpha: d.torso_alpha,
            scale_augmentation: false,
            passes: None,
            batch_size: d.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub generate: GenerateSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_preset(Preset::Desk)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Defaults for a preset; the desk preset also gets desk training settings.
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            model: ModelSection {
                preset,
                ..ModelSection::default()
            },
            train: match preset {
                Preset::Full => TrainConfig::default(),
                _ => TrainConfig::desk(),
            },
            data: DataSection {
                skeleton: match preset {
                    Preset::Full => "mpii16".into(),
                    _ => "lsp14".into(),
                },
                ..DataSection::default()
            },
            generate: GenerateSection::default(),
            eval: EvalSection::default(),
        }
    }

    /// Parses config text over the defaults of the preset it names.
    /// Unknown keys are rejected and named in the error.
    pub fn from_text(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let preset = match user.get("model").and_then(|m| m.get("preset")) {
            Some(v) => Preset::deserialize(v.clone()).map_err(|e| Error::Config(format!("model.preset: {e}")))?,
            None => Preset::Desk,
        };
        let mut base = toml::Table::try_from(Self::for_preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn skeleton(&self) -> Result<SkeletonSpec> {
        match SkeletonSpec::preset(&self.data.skeleton) {
            Ok(s) => Ok(s),
            Err(_) => {
                let path = Path::new(&self.data.skeleton);
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "data.skeleton `{}` is neither a preset (lsp14, mpii16) nor an existing file",
                        self.data.skeleton
                    )));
                }
                SkeletonSpec::from_text(&std::fs::read_to_string(path)?)
            }
        }
    }

    /// Preset, overrides and skeleton combined into a validated model shape.
    pub fn model_config(&self, skeleton: &SkeletonSpec) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = match m.preset {
            Preset::Full => ModelConfig::full(),
            Preset::Desk | Preset::Custom => ModelConfig::desk(),
        };
        cfg.preset = m.preset;
        let base = cfg.clone();
        cfg.input_size = m.input_size.unwrap_or(cfg.input_size);
        cfg.iterations = m.iterations.unwrap_or(cfg.iterations);
        cfg.max_iterations = m.max_iterations.unwrap_or(cfg.max_iterations).max(cfg.iterations);
        cfg.channels = m.channels.clone().unwrap_or(cfg.channels);
        cfg.large_kernel = m.large_kernel.unwrap_or(cfg.large_kernel);
        cfg.keypoints = skeleton.num_keypoints();
        cfg.parts = skeleton.num_parts();
        cfg.scenario = self.train.scenario;
        let shape_changed = cfg.input_size != base.input_size
            || cfg.channels != base.channels
            || cfg.large_kernel != base.large_kernel
            || cfg.keypoints != base.keypoints
            || cfg.parts != base.parts;
        if shape_changed {
            cfg.preset = Preset::Custom;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with every optional setting made explicit, so the result alone reproduces a run.
    pub fn resolved(&self) -> Result<Self> {
        let skel = self.skeleton()?;
        let m = self.model_config(&skel)?;
        let mut out = self.clone();
        out.model = ModelSection {
            preset: self.model.preset,
            input_size: Some(m.input_size),
            iterations: Some(m.iterations),
            max_iterations: Some(m.max_iterations),
            channels: Some(m.channels.clone()),
            large_kernel: Some(m.large_kernel),
        };
        out.generate.size = Some(self.generate.size.unwrap_or(m.input_size));
        out.eval.passes = Some(self.eval.passes.unwrap_or(m.iterations));
        Ok(out)
    }

    pub fn eval_options(&self) -> EvalOptions {
        let mut opts = EvalOptions {
            alpha: self.eval.alpha,
            torso_alpha: self.eval.torso_alpha,
            scenario: self.train.scenario,
            passes: self.eval.passes,
            batch_size: self.eval.batch_size.max(1),
            ..EvalOptions::default()
        };
        if self.eval.scale_augmentation {
            opts = opts.with_scale_augmentation();
        }
        opts
    }
}
