use serde::Serialize;

use super::decode::Detection;
use crate::error::{Error, Result};
use crate::supervision::PoseAnnotation;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrPoint {
    /// Responses at or above this value are called visible.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision–recall of "visible" calls made by thresholding the maximum
/// heatmap response; position correctness is not considered.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VisibilityPr {
    pub curve: Vec<PrPoint>,
    /// Area under the interpolated curve.
    pub ap: f64,
    pub positives: usize,
    pub negatives: usize,
    /// Set when the set has no occluded keypoints, making AP trivially 1.
    pub trivial: bool,
}

/// Ranks `(response, is_visible)` pairs and integrates interpolated precision.
pub fn precision_recall(items: &[(f64, bool)]) -> Result<VisibilityPr> {
    let positives = items.iter().filter(|(_, v)| *v).count();
    let negatives = items.len() - positives;
    if positives == 0 {
        return Err(Error::Contract("visibility PR needs at least one visible keypoint".into()));
    }
    if items.iter().any(|(r, _)| !r.is_finite()) {
        return Err(Error::Contract("non-finite response".into()));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    // Tied responses enter together, so the curve only has one point per distinct threshold.
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(PrPoint {
            threshold: t,
            precision: tp as f64 / (tp + fp) as f64,
            recall: tp as f64 / positives as f64,
        });
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (j, p) in curve.iter().enumerate() {
        let interp = curve[j..].iter().map(|q| q.precision).fold(0.0, f64::max);
        ap += (p.recall - prev_recall) * interp;
        prev_recall = p.recall;
    }
    Ok(VisibilityPr {
        curve,
        ap: if negatives == 0 { 1.0 } else { ap },
        positives,
        negatives,
        trivial: negatives == 0,
    })
}

/// Visible keypoints are positives, occluded (present but not visible) negatives.
pub fn visibility_pr(detections: &[Vec<Detection>], anns: &[PoseAnnotation]) -> Result<VisibilityPr> {
    if detections.len() != anns.len() {
        return Err(Error::Contract(format!(
            "{} detection sets for {} annotations",
            detections.len(),
            anns.len()
        )));
    }
    let mut items = Vec::new();
    for (dets, ann) in detections.iter().zip(anns) {
        let p = ann.active_person();
        for (k, d) in dets.iter().enumerate().take(p.len()) {
            if p.present[k] {
                items.push((d.response, p.visible[k]));
            }
        }
    }
    precision_recall(&items)
}
