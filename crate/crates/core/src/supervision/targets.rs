//! Target heatmaps, gradient masks and foreground/background balancing weights.

use rpose_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::annotation::PoseAnnotation;
use super::skeleton::SkeletonSpec;
use crate::error::{Error, Result};

/// Peak value of every synthesized Gaussian.
pub const PEAK: f64 = 12.0;
/// Keypoint Gaussian standard deviation in heatmap cells.
pub const KEYPOINT_SIGMA: f64 = 1.3;
/// Part Gaussian standard deviations as fractions of the limb length.
pub const PART_SIGMA_MAJOR: f64 = 0.15;
pub const PART_SIGMA_MINOR: f64 = 0.10;
/// Values at or below this are written as exact zeros; the remaining pixels form a Gaussian's support.
pub const SUPPORT_FLOOR: f64 = 1e-4;
/// Target value above which a pixel counts as foreground.
pub const FOREGROUND_THRESHOLD: f64 = 0.1;

/// How annotated-but-occluded keypoints are supervised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionScenario {
    /// Zero target, zero gradient over the would-be Gaussian.
    Ignore,
    /// Supervised exactly like visible keypoints.
    #[default]
    Include,
    /// Zero target with gradient, so any response there is penalized.
    Exclude,
}

impl std::str::FromStr for OcclusionScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ignore" => Ok(Self::Ignore),
            "include" => Ok(Self::Include),
            "exclude" => Ok(Self::Exclude),
            other => Err(Error::Config(format!("unknown occlusion scenario `{other}`"))),
        }
    }
}

impl std::fmt::Display for OcclusionScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ignore => "ignore",
            Self::Include => "include",
            Self::Exclude => "exclude",
        })
    }
}

/// Heatmap extent and the input-pixels-per-cell factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub height: usize,
    pub width: usize,
    pub stride: f64,
}

impl GridSpec {
    pub fn new(height: usize, width: usize, stride: f64) -> Self {
        Self { height, width, stride }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Input-pixel coordinates to continuous grid coordinates.
    pub fn to_grid(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] / self.stride, p[1] / self.stride]
    }

    pub fn to_input(&self, g: [f64; 2]) -> [f64; 2] {
        [g[0] * self.stride, g[1] * self.stride]
    }
}

/// Nearest cell centre, rounding halves up.
pub fn grid_cell(g: [f64; 2], height: usize, width: usize) -> Result<(usize, usize)> {
    let [x, y] = g;
    if !(x.is_finite() && y.is_finite()) || x < -0.5 || y < -0.5 || x >= width as f64 || y >= height as f64 {
        return Err(Error::Contract(format!(
            "keypoint ({x}, {y}) lies outside the {width}x{height} heatmap grid"
        )));
    }
    let col = ((x + 0.5).floor().max(0.0) as usize).min(width - 1);
    let row = ((y + 0.5).floor().max(0.0) as usize).min(height - 1);
    Ok((row, col))
}

fn clamp_floor(v: f64) -> f64 {
    if v > SUPPORT_FLOOR {
        v
    } else {
        0.0
    }
}

/// `PEAK · exp(−d²/2σ²)` for squared distance `d2`.
pub fn keypoint_gaussian(d2: f64, sigma: f64) -> f64 {
    PEAK * (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Isotropic Gaussian centred on the grid cell nearest to `kp` (grid units).
pub fn synth_keypoint_target(kp: [f64; 2], sigma: f64, height: usize, width: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
    }
    let (row, col) = grid_cell(kp, height, width)?;
    let mut plane = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let d2 = (x as f64 - col as f64).powi(2) + (y as f64 - row as f64).powi(2);
            plane[y * width + x] = clamp_floor(keypoint_gaussian(d2, sigma));
        }
    }
    Ok(plane)
}

/// Limb-aligned anisotropic Gaussian centred on the midpoint of `a`–`b` (grid units).
///
/// The major axis follows the limb with σ = 0.15·length, the minor axis uses
/// σ = 0.10·length. A zero-length limb falls back to the keypoint Gaussian.
pub fn synth_part_target(a: [f64; 2], b: [f64; 2], height: usize, width: usize) -> Vec<f64> {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    let (cx, cy) = ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0);
    let mut plane = vec![0.0; height * width];
    if len == 0.0 {
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                plane[y * width + x] = clamp_floor(keypoint_gaussian(d2, KEYPOINT_SIGMA));
            }
        }
        return plane;
    }
    // Direction is sign-free so swapping endpoints gives the identical plane.
    let (ux, uy) = if dx < 0.0 || (dx == 0.0 && dy < 0.0) {
        (-dx / len, -dy / len)
    } else {
        (dx / len, dy / len)
    };
    let (s_major, s_minor) = (PART_SIGMA_MAJOR * len, PART_SIGMA_MINOR * len);
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let along = px * ux + py * uy;
            let across = -px * uy + py * ux;
            let e = along * along / (2.0 * s_major * s_major) + across * across / (2.0 * s_minor * s_minor);
            plane[y * width + x] = clamp_floor(PEAK * (-e).exp());
        }
    }
    plane
}

/// Targets plus per-pixel gradient mask and loss weights for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetPack {
    /// `(K+P) × h × w`.
    pub targets: Tensor<f64>,
    /// `false` zeroes the gradient of that pixel.
    pub grad_mask: Vec<bool>,
    /// Zero where masked; otherwise each channel's foreground and background
    /// weights each sum to 0.5.
    pub pixel_weight: Tensor<f64>,
    pub keypoints: usize,
}

impl TargetPack {
    pub fn channels(&self) -> usize {
        self.targets.shape()[0]
    }

    pub fn plane(&self) -> usize {
        self.targets.shape()[1] * self.targets.shape()[2]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.targets.data()[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn channel_mask(&self, c: usize) -> &[bool] {
        &self.grad_mask[c * self.plane()..(c + 1) * self.plane()]
    }

    pub fn channel_weight(&self, c: usize) -> &[f64] {
        &self.pixel_weight.data()[c * self.plane()..(c + 1) * self.plane()]
    }
}

/// Assembles the keypoint and part targets for the active person.
pub fn build_target_pack(
    ann: &PoseAnnotation,
    skel: &SkeletonSpec,
    scenario: OcclusionScenario,
    grid: GridSpec,
) -> Result<TargetPack> {
    let k = skel.num_keypoints();
    ann.validate(k, None)?;
    let person = ann.active_person();
    if !person.visible.iter().any(|&v| v) {
        return Err(Error::Validation("active person has no visible keypoints".into()));
    }
    let (h, w, plane) = (grid.height, grid.width, grid.plane());
    let channels = k + skel.num_parts();
    let mut targets = vec![0.0; channels * plane];
    let mut mask = vec![true; channels * plane];

    let supervise = |c: usize, hypothetical: Vec<f64>, occluded: bool, targets: &mut [f64], mask: &mut [bool]| {
        let dst = &mut targets[c * plane..(c + 1) * plane];
        let m = &mut mask[c * plane..(c + 1) * plane];
        match (occluded, scenario) {
            (false, _) | (true, OcclusionScenario::Include) => dst.copy_from_slice(&hypothetical),
            (true, OcclusionScenario::Exclude) => {}
            (true, OcclusionScenario::Ignore) => {
                for (mv, &v) in m.iter_mut().zip(&hypothetical) {
                    if v > 0.0 {
                        *mv = false;
                    }
                }
            }
        }
    };

    for kp in 0..k {
        if !person.present[kp] {
            mask[kp * plane..(kp + 1) * plane].fill(false);
            continue;
        }
        let hyp = synth_keypoint_target(grid.to_grid(person.keypoints[kp]), KEYPOINT_SIGMA, h, w)?;
        supervise(kp, hyp, person.is_occluded(kp), &mut targets, &mut mask);
    }
    for (pi, &(a, b)) in skel.edges.iter().enumerate() {
        let c = k + pi;
        if !(person.present[a] && person.present[b]) {
            mask[c * plane..(c + 1) * plane].fill(false);
            continue;
        }
        let hyp = synth_part_target(grid.to_grid(person.keypoints[a]), grid.to_grid(person.keypoints[b]), h, w);
        let occluded = person.is_occluded(a) || person.is_occluded(b);
        supervise(c, hyp, occluded, &mut targets, &mut mask);
    }

    // Other people are neither supervised nor penalized.
    for (pi, other) in ann.persons.iter().enumerate() {
        if pi == ann.active {
            continue;
        }
        for kp in 0..k {
            if !other.present[kp] {
                continue;
            }
            let Ok(support) = synth_keypoint_target(grid.to_grid(other.keypoints[kp]), KEYPOINT_SIGMA, h, w) else {
                continue;
            };
            for c in 0..channels {
                for (m, &v) in mask[c * plane..(c + 1) * plane].iter_mut().zip(&support) {
                    if v > 0.0 {
                        *m = false;
                    }
                }
            }
        }
    }

    let weights = balance_weights(&targets, &mask, channels, plane);
    Ok(TargetPack {
        targets: Tensor::new(vec![channels, h, w], targets)?,
        grad_mask: mask,
        pixel_weight: Tensor::new(vec![channels, h, w], weights)?,
        keypoints: k,
    })
}

/// Per channel, spreads 0.5 evenly over unmasked foreground pixels and 0.5 over unmasked background.
pub fn balance_weights(targets: &[f64], mask: &[bool], channels: usize, plane: usize) -> Vec<f64> {
    let mut weights = vec![0.0; channels * plane];
    for c in 0..channels {
        let range = c * plane..(c + 1) * plane;
        let (t, m) = (&targets[range.clone()], &mask[range.clone()]);
        let fg = t.iter().zip(m).filter(|(&v, &k)| k && v > FOREGROUND_THRESHOLD).count();
        let bg = m.iter().filter(|&&k| k).count() - fg;
        for ((wv, &v), &k) in weights[range].iter_mut().zip(t).zip(m) {
            if !k {
                continue;
            }
            *wv = if v > FOREGROUND_THRESHOLD { 0.5 / fg as f64 } else { 0.5 / bg as f64 };
        }
    }
    weights
}
