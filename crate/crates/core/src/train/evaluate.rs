use rpose_tensor::Tensor;
use serde::Serialize;

use crate::data::{normalize, warp_image, AugmentParams, Dataset, Sample};
use crate::error::{Error, Result};
use crate::eval::{decode_head, mean_responses, pck_torso, pckh, visibility_pr, Detection, MetricReport, VisibilityPr};
use crate::model::{HeadOutputs, PoseNet, OUTPUT_STRIDE};
use crate::supervision::{build_target_pack, weighted_mse_loss, LossReport, OcclusionScenario, TargetPack};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// PCKh threshold factor.
    pub alpha: f64,
    /// PCK (torso) threshold factor.
    pub torso_alpha: f64,
    /// Heatmaps are averaged over these input scales.
    pub scales: Vec<f64>,
    /// Targets used for the loss and per-head error.
    pub scenario: OcclusionScenario,
    /// Recurrent passes; the model's configured count when `None`.
    pub passes: Option<usize>,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            torso_alpha: 0.2,
            scales: vec![1.0],
            scenario: OcclusionScenario::Include,
            passes: None,
            batch_size: 16,
        }
    }
}

impl EvalOptions {
    /// Test-time scale augmentation over 0.9, 1.0 and 1.1.
    pub fn with_scale_augmentation(mut self) -> Self {
        self.scales = vec![0.9, 1.0, 1.1];
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// PCKh of the final head.
    pub pckh: MetricReport,
    /// Torso-normalized PCK of the final head.
    pub pck: MetricReport,
    /// Overall PCKh of every recurrent pass, pass 0 first.
    pub pckh_per_pass: Vec<f64>,
    /// Balanced training loss over all heads.
    pub loss: LossReport,
    /// Plain mean squared error per head (`head_aux`, then passes) over unmasked pixels.
    pub head_mse: Vec<f64>,
    /// `None` when the set has no visible keypoints.
    pub visibility: Option<VisibilityPr>,
    pub mean_visible_response: Option<f64>,
    pub mean_occluded_response: Option<f64>,
    /// Final-head detections per sample.
    pub detections: Vec<Vec<Detection>>,
}

/// Bilinear sample of one `h × w` plane with edge clamping.
fn sample_plane(plane: &[f32], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Adds heads computed on an input rescaled by `scale` (about the frame
/// centre) into `acc`, resampled onto the unscaled grid.
fn accumulate(acc: &mut [f64], head: &Tensor<f32>, scale: f64, size: usize) {
    let (n, c, h, w) = head.dims4().expect("heads are 4-d");
    let centre = (size as f64 - 1.0) / 2.0;
    let stride = OUTPUT_STRIDE as f64;
    let plane = h * w;
    for i in 0..n * c {
        let src = &head.data()[i * plane..(i + 1) * plane];
        let dst = &mut acc[i * plane..(i + 1) * plane];
        if scale == 1.0 {
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s as f64);
            continue;
        }
        for y in 0..h {
            for x in 0..w {
                let map = |g: usize| (centre + scale * (g as f64 * stride - centre)) / stride;
                dst[y * w + x] += sample_plane(src, h, w, map(x), map(y));
            }
        }
    }
}

/// Eval-mode heads for raw images, averaged over `scales`.
pub fn predict_heads(model: &PoseNet<f32>, images: &[&Tensor<f32>], scales: &[f64], passes: Option<usize>) -> Result<HeadOutputs<f32>> {
    if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Config(format!("evaluation scales must be positive, got {scales:?}")));
    }
    let size = model.config().input_size;
    let mut sums: Option<Vec<Vec<f64>>> = None;
    let mut shapes = Vec::new();
    for &scale in scales {
        let batch: Vec<Tensor<f32>> = images
            .iter()
            .map(|img| {
                let img = if scale == 1.0 {
                    (*img).clone()
                } else {
                    warp_image(img, &AugmentParams { scale, ..AugmentParams::identity() }.affine(size))
                };
                normalize(&img, &model.input_mean)
            })
            .collect();
        let out = model.forward(&Tensor::stack(&batch)?, passes)?;
        let heads = out.all();
        let acc = sums.get_or_insert_with(|| {
            shapes = heads.iter().map(|h| h.shape().to_vec()).collect();
            heads.iter().map(|h| vec![0.0; h.numel()]).collect()
        });
        for (a, h) in acc.iter_mut().zip(&heads) {
            accumulate(a, h, scale, size);
        }
    }
    let k = scales.len() as f64;
    let mut heads = sums
        .expect("at least one scale")
        .into_iter()
        .zip(shapes)
        .map(|(s, shape)| Tensor::new(shape, s.into_iter().map(|v| (v / k) as f32).collect()));
    let head_aux = heads.next().expect("aux head")?;
    Ok(HeadOutputs {
        head_aux,
        per_pass: heads.collect::<std::result::Result<_, _>>()?,
    })
}

fn head_mse(head: &Tensor<f32>, packs: &[TargetPack]) -> (f64, usize) {
    let mut sum = 0.0;
    let mut count = 0;
    let per_sample = head.numel() / packs.len();
    for (s, pack) in packs.iter().enumerate() {
        let pred = &head.data()[s * per_sample..(s + 1) * per_sample];
        for ((&p, &t), &m) in pred.iter().zip(pack.targets.data()).zip(&pack.grad_mask) {
            if m {
                sum += (p as f64 - t).powi(2);
                count += 1;
            }
        }
    }
    (sum, count)
}

/// Scores `model` on `data` without modifying it.
pub fn evaluate(model: &PoseNet<f32>, data: &Dataset, opts: &EvalOptions) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("cannot evaluate on an empty dataset".into()));
    }
    let cfg = model.config();
    let k = data.skeleton.num_keypoints();
    if cfg.keypoints != k || cfg.parts != data.skeleton.num_parts() {
        return Err(Error::Config(format!(
            "model predicts {} keypoints and {} parts, dataset skeleton has {} and {}",
            cfg.keypoints,
            cfg.parts,
            k,
            data.skeleton.num_parts()
        )));
    }
    let passes = opts.passes.unwrap_or(cfg.iterations);
    let heads_count = passes + 2;
    let grid = data.grid();
    let anns: Vec<_> = data.samples.iter().map(|s| s.annotation.clone()).collect();

    let mut per_pass_dets: Vec<Vec<Vec<Detection>>> = vec![Vec::new(); passes + 1];
    let mut mse = vec![(0.0, 0usize); heads_count];
    let mut loss_sum = LossReport {
        per_head: vec![0.0; heads_count],
        keypoint_term: vec![0.0; heads_count],
        part_term: vec![0.0; heads_count],
        ..Default::default()
    };
    for chunk in data.samples.chunks(opts.batch_size.max(1)) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s: &Sample| &s.image).collect();
        let out = predict_heads(model, &images, &opts.scales, Some(passes))?;
        for (p, head) in out.per_pass.iter().enumerate() {
            per_pass_dets[p].extend(decode_head(head, k)?);
        }
        let packs = chunk
            .iter()
            .map(|s| build_target_pack(&s.annotation, &data.skeleton, opts.scenario, grid))
            .collect::<Result<Vec<_>>>()?;
        let heads = out.all();
        for (m, h) in mse.iter_mut().zip(&heads) {
            let (s, c) = head_mse(h, &packs);
            m.0 += s;
            m.1 += c;
        }
        // Weighted by batch size so the result is the per-sample mean.
        let (report, _) = weighted_mse_loss(&heads, &packs)?;
        let w = chunk.len() as f64;
        loss_sum.total += report.total * w;
        loss_sum.masked_channels += report.masked_channels;
        for i in 0..heads_count {
            loss_sum.per_head[i] += report.per_head[i] * w;
            loss_sum.keypoint_term[i] += report.keypoint_term[i] * w;
            loss_sum.part_term[i] += report.part_term[i] * w;
        }
    }
    let n = data.len() as f64;
    loss_sum.total /= n;
    for v in loss_sum
        .per_head
        .iter_mut()
        .chain(loss_sum.keypoint_term.iter_mut())
        .chain(loss_sum.part_term.iter_mut())
    {
        *v /= n;
    }

    let pckh_per_pass = per_pass_dets
        .iter()
        .map(|d| pckh(d, &anns, k, opts.alpha).map(|r| r.overall))
        .collect::<Result<Vec<_>>>()?;
    let detections = per_pass_dets.pop().expect("at least one pass");
    let (mean_visible_response, mean_occluded_response) = mean_responses(&detections, &anns);
    let visibility = match visibility_pr(&detections, &anns) {
        Ok(pr) => Some(pr),
        Err(Error::Contract(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        pckh: pckh(&detections, &anns, k, opts.alpha)?,
        pck: pck_torso(&detections, &anns, k, opts.torso_alpha)?,
        pckh_per_pass,
        loss: loss_sum,
        head_mse: mse.iter().map(|&(s, c)| if c == 0 { 0.0 } else { s / c as f64 }).collect(),
        visibility,
        mean_visible_response,
        mean_occluded_response,
        detections,
    })
}
