//! Foreground/background-balanced squared error over every prediction head.

use rpose_tensor::{Real, Tensor};
use serde::Serialize;

use super::targets::TargetPack;
use crate::error::{Error, Result};

/// Loss of one batch.
///
/// Per head and sample, each channel contributes `Σ w·(pred − target)²` over
/// unmasked pixels; keypoint channels and part channels are averaged
/// separately and combined 50/50. Heads are weighted uniformly and samples
/// averaged.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub per_head: Vec<f64>,
    pub keypoint_term: Vec<f64>,
    pub part_term: Vec<f64>,
    /// Channels (summed over samples, counted once per head set) whose every pixel is masked.
    pub masked_channels: usize,
}

/// Weights of the keypoint and part groups; a missing group hands its share to the other.
fn group_weights(keypoints: usize, parts: usize) -> (f64, f64) {
    match (keypoints, parts) {
        (0, _) => (0.0, 1.0),
        (_, 0) => (1.0, 0.0),
        _ => (0.5, 0.5),
    }
}

/// Evaluates the loss for `heads` (each `N × (K+P) × h × w`) against one pack
/// per sample and returns the gradient with respect to every head.
pub fn weighted_mse_loss<T: Real>(heads: &[&Tensor<T>], packs: &[TargetPack]) -> Result<(LossReport, Vec<Tensor<T>>)> {
    let first = packs
        .first()
        .ok_or_else(|| Error::Contract("loss needs at least one target pack".into()))?;
    if heads.is_empty() {
        return Err(Error::Contract("loss needs at least one head".into()));
    }
    let k = first.keypoints;
    let channels = first.channels();
    let plane = first.plane();
    let parts = channels - k;
    let n = packs.len();
    let expected = [n, channels, first.targets.shape()[1], first.targets.shape()[2]];
    for h in heads {
        if h.shape() != expected {
            return Err(Error::Contract(format!(
                "head shape {:?} does not match targets {:?}",
                h.shape(),
                expected
            )));
        }
    }
    for p in packs {
        if p.targets.shape() != first.targets.shape() || p.keypoints != k {
            return Err(Error::Contract("target packs in a batch must share a shape".into()));
        }
    }

    let (wk, wp) = group_weights(k, parts);
    let coef: Vec<f64> = (0..channels)
        .map(|c| if c < k { wk / k as f64 } else { wp / parts as f64 })
        .collect();
    let scale = 1.0 / (n as f64 * heads.len() as f64);

    let mut report = LossReport {
        per_head: vec![0.0; heads.len()],
        keypoint_term: vec![0.0; heads.len()],
        part_term: vec![0.0; heads.len()],
        ..Default::default()
    };
    report.masked_channels = packs
        .iter()
        .map(|p| (0..channels).filter(|&c| p.channel_mask(c).iter().all(|m| !m)).count())
        .sum();

    let mut grads = Vec::with_capacity(heads.len());
    for (hi, head) in heads.iter().enumerate() {
        let mut grad = vec![T::zero(); head.numel()];
        let (mut kp_sum, mut part_sum) = (0.0, 0.0);
        for (s, pack) in packs.iter().enumerate() {
            for c in 0..channels {
                let off = (s * channels + c) * plane;
                let pred = &head.data()[off..off + plane];
                let (t, m, w) = (pack.channel(c), pack.channel_mask(c), pack.channel_weight(c));
                let mut term = 0.0;
                for i in 0..plane {
                    if !m[i] {
                        continue;
                    }
                    let diff = pred[i].as_f64() - t[i];
                    term += w[i] * diff * diff;
                    grad[off + i] = T::from_f64_lossy(scale * coef[c] * 2.0 * w[i] * diff);
                }
                if c < k {
                    kp_sum += term;
                } else {
                    part_sum += term;
                }
            }
        }
        let kp_term = if k > 0 { kp_sum / (k * n) as f64 } else { 0.0 };
        let part_term = if parts > 0 { part_sum / (parts * n) as f64 } else { 0.0 };
        report.keypoint_term[hi] = kp_term;
        report.part_term[hi] = part_term;
        report.per_head[hi] = wk * kp_term + wp * part_term;
        grads.push(Tensor::new(head.shape().to_vec(), grad)?);
    }
    report.total = report.per_head.iter().sum::<f64>() / heads.len() as f64;
    Ok((report, grads))
}
