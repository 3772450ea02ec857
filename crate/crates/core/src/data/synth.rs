//! Procedural stick-figure scenes with exact keypoint ground truth.

use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rpose_tensor::Tensor;

use crate::error::{Error, Result};
use crate::supervision::{Person, PoseAnnotation, SkeletonSpec};

/// Probability that a scene contains a second, non-active figure.
pub const DISTRACTOR_PROB: f64 = 0.3;
/// Relative jitter applied to every bone length.
pub const BONE_JITTER: f64 = 0.2;

/// Base bone lengths in figure units. The head segment (neck to crown) is
/// deliberately large so that half its length stays above the heatmap
/// quantization error at desk resolution.
const HEAD: f64 = 0.20;
const NECK: f64 = 0.05;
const TORSO: f64 = 0.25;
const SHOULDER_HALF: f64 = 0.10;
const HIP_HALF: f64 = 0.07;
const UPPER_ARM: f64 = 0.16;
const FOREARM: f64 = 0.14;
const THIGH: f64 = 0.21;
const SHIN: f64 = 0.20;

/// Axis-aligned rectangle in input pixels, bounds inclusive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        p[0] >= self.x0 && p[0] <= self.x1 && p[1] >= self.y0 && p[1] <= self.y1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    /// `3 × S × S`, integer values in `[0, 255]`.
    pub image: Tensor<f32>,
    pub annotation: PoseAnnotation,
    /// Occluders painted over the active figure.
    pub occluders: Vec<Rect>,
}

impl SyntheticScene {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    /// Paints `rect` over the image and clears the visibility of every
    /// active-person keypoint it contains.
    pub fn occlude(&mut self, rect: Rect, color: [f64; 3]) {
        self.apply_occluder(rect, color, None);
    }

    fn apply_occluder(&mut self, rect: Rect, color: [f64; 3], noise: Option<&mut ChaCha8Rng>) {
        let s = self.size();
        paint_rect(&mut self.image, s, &rect, color, noise);
        let active = self.annotation.active;
        let p = &mut self.annotation.persons[active];
        for k in 0..p.keypoints.len() {
            if p.present[k] && rect.contains(p.keypoints[k]) {
                p.visible[k] = false;
            }
        }
        self.occluders.push(rect);
    }
}

/// Joint positions of one figure by canonical name.
#[derive(Clone, Debug)]
struct Figure {
    joints: HashMap<&'static str, [f64; 2]>,
}

/// Unit vector at `deg` degrees clockwise from straight up (image y points down).
fn dir(deg: f64) -> [f64; 2] {
    let t = deg * PI / 180.0;
    [t.sin(), -t.cos()]
}

fn step(p: [f64; 2], len: f64, deg: f64) -> [f64; 2] {
    let d = dir(deg);
    [p[0] + len * d[0], p[1] + len * d[1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn mid(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
}

fn canonical(name: &str) -> Option<&'static str> {
    const NAMES: [&str; 16] = [
        "head_top", "upper_neck", "thorax", "pelvis", "r_shoulder", "r_elbow", "r_wrist", "l_shoulder", "l_elbow",
        "l_wrist", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle",
    ];
    let name = if name == "neck" { "upper_neck" } else { name };
    NAMES.iter().copied().find(|n| *n == name)
}

/// Checks that the generator can place every keypoint of `skel`.
pub fn check_skeleton(skel: &SkeletonSpec) -> Result<()> {
    for k in &skel.keypoints {
        if canonical(k).is_none() {
            return Err(Error::Config(format!("synthetic generator has no joint named `{k}`")));
        }
    }
    Ok(())
}

impl Figure {
    /// Random pose in figure units, pelvis at the origin, facing the camera
    /// (the figure's right side on the image left).
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut jit = |base: f64| base * (1.0 + rng.random_range(-BONE_JITTER..=BONE_JITTER));
        let (head, neck, torso) = (jit(HEAD), jit(NECK), jit(TORSO));
        let (sh, hip) = (jit(SHOULDER_HALF), jit(HIP_HALF));
        let (ua, fa) = ([jit(UPPER_ARM), jit(UPPER_ARM)], [jit(FOREARM), jit(FOREARM)]);
        let (th, sn) = ([jit(THIGH), jit(THIGH)], [jit(SHIN), jit(SHIN)]);

        let lean = Normal::<f64>::new(0.0, 8.0).unwrap().sample(rng).clamp(-20.0, 20.0);
        let pelvis = [0.0, 0.0];
        let thorax = step(pelvis, torso, lean);
        let upper_neck = step(thorax, neck, lean);
        let head_top = step(upper_neck, head, lean + rng.random_range(-15.0..15.0));

        let mut j = HashMap::new();
        j.insert("pelvis", pelvis);
        j.insert("thorax", thorax);
        j.insert("upper_neck", upper_neck);
        j.insert("head_top", head_top);
        // side = −1 for the figure's right (image left), +1 for its left.
        for (i, side, pre) in [(0, -1.0, "r_"), (1, 1.0, "l_")] {
            let shoulder = step(thorax, sh, lean + 90.0 * side);
            let upper = 180.0 + lean - side * rng.random_range(-20.0..160.0);
            let elbow = step(shoulder, ua[i], upper);
            let wrist = step(elbow, fa[i], upper + rng.random_range(-100.0..100.0));
            let hip_p = step(pelvis, hip, lean + 90.0 * side);
            let thigh = 180.0 + 0.3 * lean - side * rng.random_range(-10.0..40.0);
            let knee = step(hip_p, th[i], thigh);
            let ankle = step(knee, sn[i], thigh + rng.random_range(-45.0..45.0));
            for (name, p) in [
                ("shoulder", shoulder),
                ("elbow", elbow),
                ("wrist", wrist),
                ("hip", hip_p),
                ("knee", knee),
                ("ankle", ankle),
            ] {
                let key = canonical(&format!("{pre}{name}")).expect("known joint");
                j.insert(key, p);
            }
        }
        Self { joints: j }
    }

    fn bbox(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in self.joints.values() {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }

    /// Scales by `unit` pixels per figure unit and places the bounding box
    /// uniformly at random inside `[lo, hi]²`, shrinking if it does not fit.
    fn place(&mut self, rng: &mut ChaCha8Rng, unit: f64, lo: f64, hi: f64) -> f64 {
        let b = self.bbox();
        let (w, h) = (b[2] - b[0], b[3] - b[1]);
        let room = hi - lo;
        let unit = unit.min(room / w.max(1e-9)).min(room / h.max(1e-9));
        let ox = lo + rng.random_range(0.0..=(room - w * unit).max(0.0)) - b[0] * unit;
        let oy = lo + rng.random_range(0.0..=(room - h * unit).max(0.0)) - b[1] * unit;
        for p in self.joints.values_mut() {
            *p = [p[0] * unit + ox, p[1] * unit + oy];
        }
        unit
    }

    fn at(&self, name: &str) -> [f64; 2] {
        self.joints[canonical(name).expect("known joint")]
    }

    fn person(&self, skel: &SkeletonSpec, size: usize) -> Person {
        let keypoints: Vec<[f64; 2]> = skel.keypoints.iter().map(|k| self.at(k)).collect();
        let present: Vec<bool> = keypoints.iter().map(|&p| in_frame(p, size)).collect();
        Person {
            visible: present.clone(),
            present,
            keypoints,
        }
    }

    fn head_len(&self) -> f64 {
        dist(self.at("head_top"), self.at("upper_neck"))
    }

    fn torso_len(&self) -> f64 {
        dist(
            mid(self.at("r_shoulder"), self.at("l_shoulder")),
            mid(self.at("r_hip"), self.at("l_hip")),
        )
    }
}

pub(crate) fn in_frame(p: [f64; 2], size: usize) -> bool {
    let hi = size as f64 - 1.0;
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= hi && p[1] <= hi
}

fn random_color(rng: &mut ChaCha8Rng, base: [f64; 3], spread: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-spread..=spread)).clamp(0.0, 255.0))
}

fn blend(image: &mut Tensor<f32>, size: usize, x: usize, y: usize, color: [f64; 3], alpha: f64) {
    let plane = size * size;
    let data = image.data_mut();
    for (c, &v) in color.iter().enumerate() {
        let px = &mut data[c * plane + y * size + x];
        *px = (*px as f64 * (1.0 - alpha) + v * alpha) as f32;
    }
}

/// Pixel range `[lo, hi]` covered by `[a − pad, b + pad]`, clipped to the frame.
fn span(a: f64, b: f64, pad: f64, size: usize) -> std::ops::RangeInclusive<usize> {
    let lo = (a.min(b) - pad).floor().max(0.0) as usize;
    let hi = ((a.max(b) + pad).ceil().max(0.0) as usize).min(size - 1);
    lo..=hi
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    dist(p, [a[0] + t * dx, a[1] + t * dy])
}

/// Round-capped line with a one-pixel soft edge.
fn draw_capsule(image: &mut Tensor<f32>, size: usize, a: [f64; 2], b: [f64; 2], radius: f64, color: [f64; 3]) {
    for y in span(a[1], b[1], radius + 1.0, size) {
        for x in span(a[0], b[0], radius + 1.0, size) {
            let d = segment_distance([x as f64, y as f64], a, b);
            let alpha = (radius + 0.5 - d).clamp(0.0, 1.0);
            if alpha > 0.0 {
                blend(image, size, x, y, color, alpha);
            }
        }
    }
}

fn draw_quad(image: &mut Tensor<f32>, size: usize, q: [[f64; 2]; 4], color: [f64; 3]) {
    let xs = q.map(|p| p[0]);
    let ys = q.map(|p| p[1]);
    let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let (y0, y1) = (ys.iter().copied().fold(f64::INFINITY, f64::min), ys.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    for y in span(y0, y1, 0.0, size) {
        for x in span(x0, x1, 0.0, size) {
            let p = [x as f64, y as f64];
            // Inside a convex quad: same side of every edge.
            let mut sign = 0.0;
            let mut inside = true;
            for i in 0..4 {
                let (a, b) = (q[i], q[(i + 1) % 4]);
                let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                if cross != 0.0 {
                    if sign != 0.0 && cross.signum() != sign {
                        inside = false;
                        break;
                    }
                    sign = cross.signum();
                }
            }
            if inside {
                blend(image, size, x, y, color, 1.0);
            }
        }
    }
}

fn paint_rect(image: &mut Tensor<f32>, size: usize, r: &Rect, color: [f64; 3], mut noise: Option<&mut ChaCha8Rng>) {
    for y in span(r.y0, r.y1, 0.0, size) {
        for x in span(r.x0, r.x1, 0.0, size) {
            if r.contains([x as f64, y as f64]) {
                let c = match noise.as_deref_mut() {
                    Some(rng) => random_color(rng, color, 10.0),
                    None => color,
                };
                blend(image, size, x, y, c, 1.0);
            }
        }
    }
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f32> {
    let c0 = random_color(rng, [128.0; 3], 100.0);
    let c1 = random_color(rng, [128.0; 3], 100.0);
    let angle = rng.random_range(0.0..2.0 * PI);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(5.0..20.0),
            )
        })
        .collect();
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    let s = size as f64;
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s - 0.5, y as f64 / s - 0.5);
            let t = (u * angle.cos() + v * angle.sin() + 0.75) / 1.5;
            let wave: f64 = waves
                .iter()
                .map(|&(dir, freq, phase, amp)| amp * ((x as f64 * dir.cos() + y as f64 * dir.sin()) * freq + phase).sin())
                .sum();
            for c in 0..3 {
                let v = c0[c] * (1.0 - t) + c1[c] * t + wave + rng.random_range(-8.0..8.0);
                data[c * plane + y * size + x] = v.clamp(0.0, 255.0) as f32;
            }
        }
    }
    Tensor::new([3, size, size], data).expect("shape matches")
}

struct Palette {
    right: [f64; 3],
    left: [f64; 3],
    torso: [f64; 3],
    skin: [f64; 3],
}

impl Palette {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            right: random_color(rng, [215.0, 60.0, 50.0], 35.0),
            left: random_color(rng, [50.0, 90.0, 215.0], 35.0),
            torso: random_color(rng, [120.0, 180.0, 90.0], 60.0),
            skin: random_color(rng, [225.0, 190.0, 150.0], 25.0),
        }
    }
}

fn draw_figure(image: &mut Tensor<f32>, size: usize, f: &Figure, unit: f64, pal: &Palette) {
    let limb = (0.030 * unit).max(1.0);
    let leg = (0.036 * unit).max(1.2);
    draw_quad(
        image,
        size,
        [f.at("r_shoulder"), f.at("l_shoulder"), f.at("l_hip"), f.at("r_hip")],
        pal.torso,
    );
    draw_capsule(image, size, f.at("thorax"), f.at("upper_neck"), limb, pal.skin);
    let head_c = mid(f.at("head_top"), f.at("upper_neck"));
    let head_r = 0.5 * f.head_len();
    draw_capsule(image, size, head_c, head_c, head_r, pal.skin);
    for (pre, color) in [("r_", pal.right), ("l_", pal.left)] {
        let joint = color.map(|c| c * 0.6);
        let j = |n: &str| f.at(&format!("{pre}{n}"));
        draw_capsule(image, size, j("hip"), j("knee"), leg, color);
        draw_capsule(image, size, j("knee"), j("ankle"), leg, color);
        draw_capsule(image, size, j("shoulder"), j("elbow"), limb, color);
        draw_capsule(image, size, j("elbow"), j("wrist"), limb, color);
        for n in ["shoulder", "elbow", "wrist", "hip", "knee", "ankle"] {
            draw_capsule(image, size, j(n), j(n), limb * 1.2, joint);
        }
    }
}

/// Chooses occluders for the keypoints selected with probability `rate`.
///
/// Each occluder contains its keypoint and stays clear (Chebyshev distance)
/// of every keypoint not selected. At least one keypoint is never selected.
fn plan_occluders(rng: &mut ChaCha8Rng, person: &Person, rate: f64, size: usize) -> Vec<Rect> {
    let k = person.keypoints.len();
    let mut chosen: Vec<bool> = (0..k).map(|i| person.present[i] && rng.random_bool(rate)).collect();
    let present: Vec<usize> = (0..k).filter(|&i| person.present[i]).collect();
    if !present.is_empty() && present.iter().all(|&i| chosen[i]) {
        chosen[present[rng.random_range(0..present.len())]] = false;
    }
    let max_half = 0.15 * size as f64;
    let mut rects = Vec::new();
    for o in (0..k).filter(|&i| chosen[i]) {
        let kp = person.keypoints[o];
        let clear = |c: [f64; 2]| {
            (0..k)
                .filter(|&i| person.present[i] && !chosen[i])
                .map(|i| {
                    let p = person.keypoints[i];
                    (p[0] - c[0]).abs().max((p[1] - c[1]).abs())
                })
                .fold(f64::INFINITY, f64::min)
        };
        let limit = (clear(kp) - 1.0).min(max_half);
        if limit < 1.5 {
            continue;
        }
        let off = 0.25 * limit;
        let c = [kp[0] + rng.random_range(-off..=off), kp[1] + rng.random_range(-off..=off)];
        let limit = (clear(c) - 1.0).min(max_half);
        let reach = (kp[0] - c[0]).abs().max((kp[1] - c[1]).abs());
        if limit <= reach + 0.5 {
            continue;
        }
        let half = rng.random_range((reach + 0.5)..=limit);
        let aspect = rng.random_range(0.7..1.0);
        let (hx, hy) = if rng.random_bool(0.5) { (half, half * aspect) } else { (half * aspect, half) };
        // Keep the keypoint inside after the aspect squeeze.
        let (hx, hy) = (hx.max(reach + 0.5), hy.max(reach + 0.5));
        rects.push(Rect {
            x0: c[0] - hx,
            y0: c[1] - hy,
            x1: c[0] + hx,
            y1: c[1] + hy,
        });
    }
    rects
}

/// Renders one scene; identical seeds give bit-identical scenes.
pub fn generate_scene(seed: u64, skel: &SkeletonSpec, size: usize, occlusion_rate: f64) -> Result<SyntheticScene> {
    generate_scene_with(seed, skel, size, occlusion_rate, DISTRACTOR_PROB)
}

/// [`generate_scene`] with an explicit probability of a second, non-active figure.
pub fn generate_scene_with(
    seed: u64,
    skel: &SkeletonSpec,
    size: usize,
    occlusion_rate: f64,
    distractor_prob: f64,
) -> Result<SyntheticScene> {
    if !(0.0..=1.0).contains(&occlusion_rate) {
        return Err(Error::Config(format!("occlusion_rate must lie in [0, 1], got {occlusion_rate}")));
    }
    if !(0.0..=1.0).contains(&distractor_prob) {
        return Err(Error::Config(format!("distractor_prob must lie in [0, 1], got {distractor_prob}")));
    }
    if size < 16 {
        return Err(Error::Config(format!("scene size {size} is too small")));
    }
    check_skeleton(skel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut image = background(&mut rng, size);

    let mut persons = Vec::new();
    if rng.random_bool(distractor_prob) {
        let mut other = Figure::sample(&mut rng);
        let unit = s * rng.random_range(0.35..0.5);
        let unit = other.place(&mut rng, unit, 0.0, s - 1.0);
        draw_figure(&mut image, size, &other, unit, &Palette::sample(&mut rng));
        persons.push(other.person(skel, size));
    }

    let mut fig = Figure::sample(&mut rng);
    let margin = 0.06 * s;
    let unit = s * rng.random_range(0.78..0.86);
    let unit = fig.place(&mut rng, unit, margin, s - 1.0 - margin);
    draw_figure(&mut image, size, &fig, unit, &Palette::sample(&mut rng));
    let active = fig.person(skel, size);

    let occluders = plan_occluders(&mut rng, &active, occlusion_rate, size);
    let mut scene = SyntheticScene {
        seed,
        image,
        annotation: PoseAnnotation {
            active: persons.len(),
            persons: {
                persons.push(active);
                persons
            },
            head_len: fig.head_len(),
            torso_len: fig.torso_len(),
        },
        occluders: Vec::new(),
    };
    for r in occluders {
        let color = random_color(&mut rng, [128.0; 3], 110.0);
        scene.apply_occluder(r, color, Some(&mut rng));
    }
    scene.image = scene.image.map(|v| v.round().clamp(0.0, 255.0));
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_convention() {
        let up = dir(0.0);
        let right = dir(90.0);
        assert!((up[1] + 1.0).abs() < 1e-12 && up[0].abs() < 1e-12);
        assert!((right[0] - 1.0).abs() < 1e-12 && right[1].abs() < 1e-12);
    }

    #[test]
    fn figure_faces_camera() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let f = Figure::sample(&mut rng);
            assert!(f.at("r_shoulder")[0] < f.at("l_shoulder")[0]);
            assert!(f.at("r_hip")[0] < f.at("l_hip")[0]);
        }
    }

    #[test]
    fn unknown_joint_names_are_rejected() {
        let mut skel = SkeletonSpec::lsp14();
        skel.keypoints[0] = "tail".into();
        assert!(check_skeleton(&skel).is_err());
        assert!(check_skeleton(&SkeletonSpec::mpii16()).is_ok());
    }
}
