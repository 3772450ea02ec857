use serde::Serialize;

use super::decode::Detection;
use crate::error::{Error, Result};
use crate::model::OUTPUT_STRIDE;
use crate::supervision::PoseAnnotation;

/// Length that scales the correctness threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Head,
    Torso,
}

impl Reference {
    fn length(self, ann: &PoseAnnotation) -> f64 {
        match self {
            Reference::Head => ann.head_len,
            Reference::Torso => ann.torso_len,
        }
    }
}

/// Thresholds of the area-under-curve summary: 0 to 0.5 in steps of 0.01.
pub fn auc_alphas() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub reference: Reference,
    pub alpha: f64,
    /// Correct / counted per keypoint; `None` when nothing was counted.
    pub per_keypoint: Vec<Option<f64>>,
    pub correct: Vec<usize>,
    pub counted: Vec<usize>,
    /// Pooled rate over all counted keypoints.
    pub overall: f64,
    /// Mean pooled rate over [`auc_alphas`].
    pub auc: f64,
    /// Samples dropped for missing detections or a non-positive reference length.
    pub skipped: usize,
}

/// Heatmap-grid position to input pixels.
pub fn to_input(position: [f64; 2]) -> [f64; 2] {
    let s = OUTPUT_STRIDE as f64;
    [position[0] * s, position[1] * s]
}

struct Scored {
    /// Per sample: (keypoint, distance / reference) for counted keypoints.
    normalized: Vec<(usize, f64)>,
    skipped: usize,
}

fn score(detections: &[Vec<Detection>], anns: &[PoseAnnotation], reference: Reference, keypoints: usize) -> Result<Scored> {
    if detections.len() != anns.len() {
        return Err(Error::Contract(format!(
            "{} detection sets for {} annotations",
            detections.len(),
            anns.len()
        )));
    }
    let mut normalized = Vec::new();
    let mut skipped = 0;
    for (dets, ann) in detections.iter().zip(anns) {
        let person = ann.active_person();
        let len = reference.length(ann);
        if dets.len() != keypoints || person.len() != keypoints || !(len > 0.0) {
            skipped += 1;
            continue;
        }
        for k in 0..keypoints {
            // Absent and occluded keypoints are not scored.
            if !(person.present[k] && person.visible[k]) {
                continue;
            }
            let p = to_input(dets[k].position);
            let g = person.keypoints[k];
            normalized.push((k, (p[0] - g[0]).hypot(p[1] - g[1]) / len));
        }
    }
    Ok(Scored { normalized, skipped })
}

fn rate(scored: &Scored, alpha: f64) -> f64 {
    let n = scored.normalized.len();
    if n == 0 {
        return 0.0;
    }
    scored.normalized.iter().filter(|(_, d)| *d < alpha).count() as f64 / n as f64
}

/// Fraction of visible keypoints whose prediction lies strictly closer than
/// `alpha` times the reference length, both in input pixels.
pub fn pck(
    detections: &[Vec<Detection>],
    anns: &[PoseAnnotation],
    keypoints: usize,
    alpha: f64,
    reference: Reference,
) -> Result<MetricReport> {
    let scored = score(detections, anns, reference, keypoints)?;
    let mut correct = vec![0; keypoints];
    let mut counted = vec![0; keypoints];
    for &(k, d) in &scored.normalized {
        counted[k] += 1;
        if d < alpha {
            correct[k] += 1;
        }
    }
    let per_keypoint = correct
        .iter()
        .zip(&counted)
        .map(|(&c, &n)| (n > 0).then(|| c as f64 / n as f64))
        .collect();
    let alphas = auc_alphas();
    let auc = alphas.iter().map(|&a| rate(&scored, a)).sum::<f64>() / alphas.len() as f64;
    Ok(MetricReport {
        reference,
        alpha,
        per_keypoint,
        correct,
        counted,
        overall: rate(&scored, alpha),
        auc,
        skipped: scored.skipped,
    })
}

pub fn pckh(detections: &[Vec<Detection>], anns: &[PoseAnnotation], keypoints: usize, alpha: f64) -> Result<MetricReport> {
    pck(detections, anns, keypoints, alpha, Reference::Head)
}

pub fn pck_torso(detections: &[Vec<Detection>], anns: &[PoseAnnotation], keypoints: usize, alpha: f64) -> Result<MetricReport> {
    pck(detections, anns, keypoints, alpha, Reference::Torso)
}

/// Mean detection response over present keypoints of the active person,
/// split into (visible, occluded); `None` where a set is empty.
pub fn mean_responses(detections: &[Vec<Detection>], anns: &[PoseAnnotation]) -> (Option<f64>, Option<f64>) {
    let (mut vis, mut occ) = ((0.0, 0usize), (0.0, 0usize));
    for (dets, ann) in detections.iter().zip(anns) {
        let p = ann.active_person();
        for (k, d) in dets.iter().enumerate().take(p.len()) {
            if !p.present[k] {
                continue;
            }
            let acc = if p.visible[k] { &mut vis } else { &mut occ };
            acc.0 += d.response;
            acc.1 += 1;
        }
    }
    let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
    (mean(vis), mean(occ))
}
