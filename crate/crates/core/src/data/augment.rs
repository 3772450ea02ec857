//! Rotation, scaling, flipping and crop jitter applied jointly to an image and its labels.

use rand::Rng;
use rpose_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::synth::in_frame;
use crate::error::{Error, Result};
use crate::supervision::{PoseAnnotation, SkeletonSpec};

/// Fraction of the active person's keypoint bounding box that must stay in frame.
pub const MIN_INSIDE: f64 = 0.8;

/// Sampling ranges for [`AugmentParams`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Degrees; rotations are drawn from `[−max_rotation, max_rotation]`.
    pub max_rotation: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    /// Pixels; each axis is shifted by up to this much.
    pub crop_jitter: f64,
}

impl AugmentConfig {
    /// Default ranges, with the crop jitter of 8 px at 248 px scaled to `size`.
    pub fn for_size(size: usize) -> Self {
        Self {
            max_rotation: 30.0,
            scale_min: 0.75,
            scale_max: 1.25,
            flip_prob: 0.5,
            crop_jitter: 8.0 * size as f64 / 248.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.max_rotation >= 0.0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && (0.0..=1.0).contains(&self.flip_prob)
            && self.crop_jitter >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Degrees, counter-clockwise as seen on screen.
    pub rotation: f64,
    pub scale: f64,
    pub flip: bool,
    /// Translation in pixels applied after rotation and scaling.
    pub crop: [f64; 2],
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            flip: false,
            crop: [0.0, 0.0],
        }
    }

    pub fn sample<R: Rng>(rng: &mut R, cfg: &AugmentConfig) -> Self {
        let r = cfg.max_rotation;
        let j = cfg.crop_jitter;
        Self {
            rotation: if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 },
            scale: if cfg.scale_max > cfg.scale_min {
                rng.random_range(cfg.scale_min..=cfg.scale_max)
            } else {
                cfg.scale_min
            },
            flip: rng.random_bool(cfg.flip_prob),
            crop: if j > 0.0 {
                [rng.random_range(-j..=j), rng.random_range(-j..=j)]
            } else {
                [0.0, 0.0]
            },
        }
    }

    /// Forward map from source to destination pixels in a `size × size` frame,
    /// about the frame centre `(size − 1)/2`.
    pub fn affine(&self, size: usize) -> Affine {
        let c = (size as f64 - 1.0) / 2.0;
        let (sin, cos) = self.rotation.to_radians().sin_cos();
        let s = self.scale;
        // Rotation in y-down coordinates, optionally preceded by x ↦ 2c − x.
        let fx = if self.flip { -1.0 } else { 1.0 };
        let m = [[s * cos * fx, s * sin], [-s * sin * fx, s * cos]];
        let src_c = [c, c];
        let t = [
            c + self.crop[0] - (m[0][0] * src_c[0] + m[0][1] * src_c[1]),
            c + self.crop[1] - (m[1][0] * src_c[0] + m[1][1] * src_c[1]),
        ];
        Affine { m, t }
    }
}

/// `p ↦ m·p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine {
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.m[0][0] * p[0] + self.m[0][1] * p[1] + self.t[0],
            self.m[1][0] * p[0] + self.m[1][1] * p[1] + self.t[1],
        ]
    }

    pub fn inverse(&self) -> Affine {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let m = [[d / det, -b / det], [-c / det, a / det]];
        let t = [
            -(m[0][0] * self.t[0] + m[0][1] * self.t[1]),
            -(m[1][0] * self.t[0] + m[1][1] * self.t[1]),
        ];
        Affine { m, t }
    }
}

/// Bilinear inverse warp of a `C × S × S` image; samples outside the source
/// repeat the nearest edge pixel.
pub fn warp_image(image: &Tensor<f32>, forward: &Affine) -> Tensor<f32> {
    let shape = image.shape();
    let (channels, h, w) = (shape[0], shape[1], shape[2]);
    let inv = forward.inverse();
    let src = image.data();
    let mut out = vec![0.0f32; image.numel()];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let sy = sy.clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..channels {
                let at = |yy: usize, xx: usize| src[c * plane + yy * w + xx] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[c * plane + y * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("same shape")
}

/// Fraction of the active person's keypoint bounding box that lies inside the frame.
pub fn fraction_inside(points: &[[f64; 2]], size: usize) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        y0 = y0.min(p[1]);
        x1 = x1.max(p[0]);
        y1 = y1.max(p[1]);
    }
    // Pad by half a pixel so degenerate boxes have area.
    let (x0, y0, x1, y1) = (x0 - 0.5, y0 - 0.5, x1 + 0.5, y1 + 0.5);
    let hi = size as f64 - 0.5;
    let ix = (x1.min(hi) - x0.max(-0.5)).max(0.0);
    let iy = (y1.min(hi) - y0.max(-0.5)).max(0.0);
    ix * iy / ((x1 - x0) * (y1 - y0))
}

/// Transforms the annotation; keypoints leaving the frame become absent.
pub fn augment_annotation(ann: &PoseAnnotation, skel: &SkeletonSpec, p: &AugmentParams, size: usize) -> Result<PoseAnnotation> {
    let f = p.affine(size);
    let active = ann.active_person();
    let moved: Vec<[f64; 2]> = (0..active.len())
        .filter(|&k| active.present[k])
        .map(|k| f.apply(active.keypoints[k]))
        .collect();
    let inside = fraction_inside(&moved, size);
    if inside < MIN_INSIDE {
        return Err(Error::Contract(format!(
            "augmentation leaves only {:.0}% of the person's box in frame",
            inside * 100.0
        )));
    }
    let mut out = ann.clone();
    for person in &mut out.persons {
        let src = person.clone();
        for k in 0..src.len() {
            // After a flip, label k is carried by the mirrored joint.
            let from = if p.flip { skel.mirror[k] } else { k };
            let q = f.apply(src.keypoints[from]);
            let present = src.present[from] && in_frame(q, size);
            person.keypoints[k] = q;
            person.present[k] = present;
            person.visible[k] = present && src.visible[from];
        }
    }
    let a = &out.persons[out.active];
    if ann.active_person().visible.iter().any(|&v| v) && !a.visible.iter().any(|&v| v) {
        return Err(Error::Contract("augmentation moves every visible keypoint out of frame".into()));
    }
    out.head_len *= p.scale;
    out.torso_len *= p.scale;
    Ok(out)
}

/// Warps `image` and maps `ann` with the same transform.
pub fn augment(image: &Tensor<f32>, ann: &PoseAnnotation, skel: &SkeletonSpec, p: &AugmentParams) -> Result<(Tensor<f32>, PoseAnnotation)> {
    let size = image.shape()[2];
    let out = augment_annotation(ann, skel, p, size)?;
    Ok((warp_image(image, &p.affine(size)), out))
}

/// Draws parameters until the transform keeps the person in frame; falls
/// back to the identity after `attempts` rejections.
pub fn sample_valid<R: Rng>(
    rng: &mut R,
    cfg: &AugmentConfig,
    ann: &PoseAnnotation,
    skel: &SkeletonSpec,
    size: usize,
    attempts: usize,
) -> AugmentParams {
    for _ in 0..attempts {
        let p = AugmentParams::sample(rng, cfg);
        if augment_annotation(ann, skel, &p, size).is_ok() {
            return p;
        }
    }
    AugmentParams::identity()
}
