//! Checkpoint file.
//!
//! Layout: magic `RHNM`, `u32` version, `u32` header length and a TOML
//! header with sorted keys (model config, input mean, optional skeleton and
//! training position), then `u32` tensor count and per tensor a `u32` name
//! length, the UTF-8 name and an `RHNT` container. Integers little-endian.

use std::io::{Cursor, Read};
use std::path::Path;

use rpose_tensor::io::{read_tensor, write_tensor};
use rpose_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::PoseNet;
use crate::error::{Error, Result};
use crate::supervision::SkeletonSpec;
use crate::util::atomic_write;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RHNM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a training run, for resuming.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    input_mean: [f64; 3],
    skeleton: Option<toml::Table>,
    state: Option<TrainState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: PoseNet<f32>,
    pub skeleton: Option<SkeletonSpec>,
    pub state: Option<TrainState>,
    /// Tensors that are not part of the model, such as optimizer velocities.
    pub extra: Vec<(String, Tensor<f32>)>,
}

fn running_names(layer: usize) -> [String; 2] {
    [format!("layer{layer}.bn.running_mean"), format!("layer{layer}.bn.running_var")]
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(format!("checkpoint: {}", msg.into()))
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    cur.read_exact(&mut b).map_err(|_| format_err("truncated file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(cur: &mut Cursor<&[u8]>, len: usize) -> Result<Vec<u8>> {
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if len > remaining {
        return Err(format_err("truncated file"));
    }
    let mut buf = vec![0u8; len];
    cur.read_exact(&mut buf)?;
    Ok(buf)
}

impl Checkpoint {
    pub fn new(model: PoseNet<f32>) -> Self {
        Self {
            model,
            skeleton: None,
            state: None,
            extra: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let skeleton = match &self.skeleton {
            Some(s) => Some(toml::from_str::<toml::Table>(&s.to_text()).map_err(|e| format_err(e.to_string()))?),
            None => None,
        };
        let header = Header {
            model: self.model.config().clone(),
            input_mean: self.model.input_mean,
            skeleton,
            state: self.state,
        };
        let value = toml::Value::try_from(&header).map_err(|e| format_err(e.to_string()))?;
        let text = toml::to_string(&value).map_err(|e| format_err(e.to_string()))?;

        let mut tensors: Vec<(String, Tensor<f32>)> = self
            .model
            .param_names()
            .into_iter()
            .zip(self.model.params().into_iter().cloned())
            .collect();
        for (i, stats) in self.model.bn_stats() {
            let [m, v] = running_names(i + 1);
            tensors.push((m, Tensor::new([stats.channels()], stats.running_mean.clone())?));
            tensors.push((v, Tensor::new([stats.channels()], stats.running_var.clone())?));
        }
        tensors.extend(self.extra.iter().cloned());

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = read_bytes(&mut cur, 4).map_err(|_| format_err("file too short for magic"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(format_err(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut cur)?;
        if version != CHECKPOINT_VERSION {
            return Err(format_err(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let len = read_u32(&mut cur)? as usize;
        let text = String::from_utf8(read_bytes(&mut cur, len)?).map_err(|_| format_err("header is not UTF-8"))?;
        let header: Header = toml::from_str(&text).map_err(|e| format_err(format!("header: {e}")))?;
        header.model.validate()?;
        let skeleton = match header.skeleton {
            Some(t) => Some(SkeletonSpec::from_text(&toml::to_string(&t).map_err(|e| format_err(e.to_string()))?)?),
            None => None,
        };

        let count = read_u32(&mut cur)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = read_u32(&mut cur)? as usize;
            let name = String::from_utf8(read_bytes(&mut cur, len)?).map_err(|_| format_err("tensor name is not UTF-8"))?;
            let t: Tensor<f32> = read_tensor(&mut cur).map_err(|e| format_err(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(format_err("trailing bytes after last tensor"));
        }

        let mut model = PoseNet::<f32>::new(header.model, 0)?;
        model.input_mean = header.input_mean;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<f32>> {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| format_err(format!("missing tensor `{name}`")))?;
            let (_, t) = tensors.remove(pos);
            if t.shape() != shape {
                return Err(format_err(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let names = model.param_names();
        for (name, p) in names.iter().zip(model.params_mut()) {
            *p = take(name, &p.shape().to_vec())?;
        }
        for (i, stats) in model.bn_stats_mut() {
            let [m, v] = running_names(i + 1);
            let c = [stats.channels()];
            stats.running_mean = take(&m, &c)?.into_data();
            stats.running_var = take(&v, &c)?.into_data();
        }
        Ok(Self {
            model,
            skeleton,
            state: header.state,
            extra: tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_model(model: &PoseNet<f32>, path: &Path) -> Result<()> {
    Checkpoint::new(model.clone()).save(path)
}

pub fn load_model(path: &Path) -> Result<PoseNet<f32>> {
    Ok(Checkpoint::load(path)?.model)
}

/// Loads a model and rejects it if its architecture differs from `expected`.
///
/// The recurrent pass count and occlusion scenario may differ.
pub fn load_model_checked(path: &Path, expected: &ModelConfig) -> Result<PoseNet<f32>> {
    let model = load_model(path)?;
    let got = model.config();
    let mismatch = |field: &str, a: String, b: String| {
        Err(Error::Config(format!("checkpoint has {field} = {a}, configuration expects {b}")))
    };
    if got.keypoints != expected.keypoints {
        return mismatch("keypoints", got.keypoints.to_string(), expected.keypoints.to_string());
    }
    if got.parts != expected.parts {
        return mismatch("parts", got.parts.to_string(), expected.parts.to_string());
    }
    if got.input_size != expected.input_size {
        return mismatch("input_size", got.input_size.to_string(), expected.input_size.to_string());
    }
    if got.channels != expected.channels {
        return mismatch("channels", format!("{:?}", got.channels), format!("{:?}", expected.channels));
    }
    if got.large_kernel != expected.large_kernel {
        return mismatch("large_kernel", got.large_kernel.to_string(), expected.large_kernel.to_string());
    }
    Ok(model)
}
