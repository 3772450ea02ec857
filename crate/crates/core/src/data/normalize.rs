//! Per-channel mean subtraction.

use rpose_tensor::Tensor;

use crate::error::{Error, Result};

/// Mean of each RGB channel over a set of `3 × H × W` images.
pub fn channel_mean<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<[f64; 3]> {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Contract(format!("expected a 3×H×W image, got {s:?}")));
        }
        let plane = s[1] * s[2];
        for (c, chunk) in img.data().chunks(plane).enumerate() {
            sum[c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return Err(Error::Contract("mean of an empty image set".into()));
    }
    Ok(sum.map(|s| s / count as f64))
}

fn shift(image: &Tensor<f32>, mean: &[f64; 3], sign: f64) -> Tensor<f32> {
    let s = image.shape();
    let plane = s[s.len() - 2] * s[s.len() - 1];
    let mut out = image.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let m = (sign * mean[i % 3]) as f32;
        chunk.iter_mut().for_each(|v| *v += m);
    }
    out
}

/// Subtracts `mean` per channel from a `3 × H × W` or `N × 3 × H × W` tensor.
pub fn normalize(image: &Tensor<f32>, mean: &[f64; 3]) -> Tensor<f32> {
    shift(image, mean, -1.0)
}

pub fn denormalize(image: &Tensor<f32>, mean: &[f64; 3]) -> Tensor<f32> {
    shift(image, mean, 1.0)
}
