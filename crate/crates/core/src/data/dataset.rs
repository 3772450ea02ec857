use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rpose_tensor::Tensor;

use super::augment::{augment, sample_valid, AugmentConfig};
use super::io::{load_annotations, read_image, resolve_image, write_annotations, write_ppm, AnnotationRecord};
use super::normalize::{channel_mean, normalize};
use super::synth::{generate_scene_with, DISTRACTOR_PROB};
use crate::error::{Error, Result};
use crate::model::OUTPUT_STRIDE;
use crate::supervision::{build_target_pack, GridSpec, OcclusionScenario, PoseAnnotation, SkeletonSpec, TargetPack};

/// One image (`3 × S × S`, values in `[0, 255]`) and its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub annotation: PoseAnnotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub skeleton: SkeletonSpec,
    /// Side length of every image.
    pub size: usize,
    pub samples: Vec<Sample>,
}

/// Seeds for `count` scenes drawn from one master seed.
pub fn scene_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.random()).collect()
}

/// Visit order of `len` samples in `epoch`; a pure function of its arguments.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

impl Dataset {
    pub fn synthetic(skeleton: &SkeletonSpec, size: usize, count: usize, occlusion_rate: f64, seed: u64) -> Result<Self> {
        Self::synthetic_with(skeleton, size, count, occlusion_rate, DISTRACTOR_PROB, seed)
    }

    /// [`Self::synthetic`] with an explicit probability of a second, non-active figure per scene.
    pub fn synthetic_with(
        skeleton: &SkeletonSpec,
        size: usize,
        count: usize,
        occlusion_rate: f64,
        distractor_prob: f64,
        seed: u64,
    ) -> Result<Self> {
        let samples = scene_seeds(seed, count)
            .into_iter()
            .map(|s| {
                let scene = generate_scene_with(s, skeleton, size, occlusion_rate, distractor_prob)?;
                Ok(Sample {
                    image: scene.image,
                    annotation: scene.annotation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            skeleton: skeleton.clone(),
            size,
            samples,
        })
    }

    /// Loads an annotation file and its images; all images must be square and equally sized.
    pub fn load(annotations: &Path, skeleton: &SkeletonSpec) -> Result<Self> {
        let records = load_annotations(annotations)?;
        let mut samples = Vec::with_capacity(records.len());
        let mut size = None;
        for (i, rec) in records.iter().enumerate() {
            let path = resolve_image(annotations, &rec.image);
            let image = read_image(&path)?;
            let (h, w) = (image.shape()[1], image.shape()[2]);
            if h != w || *size.get_or_insert(h) != h {
                return Err(Error::Validation(format!(
                    "{}: images must be square and share one size, got {w}x{h}",
                    path.display()
                )));
            }
            let ann = rec.annotation();
            ann.validate(skeleton.num_keypoints(), Some((w, h)))
                .map_err(|e| Error::Validation(format!("{}: record {}: {e}", annotations.display(), i + 1)))?;
            samples.push(Sample { image, annotation: ann });
        }
        Ok(Self {
            skeleton: skeleton.clone(),
            size: size.unwrap_or(0),
            samples,
        })
    }

    /// Writes `images/NNNNNN.ppm`, `annotations.jsonl` and `skeleton.toml` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut records = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            let name = format!("images/{i:06}.ppm");
            write_ppm(&dir.join(&name), &s.image)?;
            records.push(AnnotationRecord::new(name, &s.annotation));
        }
        write_annotations(&dir.join("annotations.jsonl"), &records)?;
        crate::util::atomic_write(&dir.join("skeleton.toml"), self.skeleton.to_text().as_bytes())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `holdout` samples.
    pub fn split(mut self, holdout: usize) -> (Self, Self) {
        let at = self.samples.len().saturating_sub(holdout);
        let tail = self.samples.split_off(at);
        let rest = Self {
            skeleton: self.skeleton.clone(),
            size: self.size,
            samples: tail,
        };
        (self, rest)
    }

    pub fn channel_mean(&self) -> Result<[f64; 3]> {
        channel_mean(self.samples.iter().map(|s| &s.image))
    }

    pub fn grid(&self) -> GridSpec {
        let side = self.size / OUTPUT_STRIDE;
        GridSpec::new(side, side, OUTPUT_STRIDE as f64)
    }
}

/// Normalized network input plus supervision for a set of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `N × 3 × S × S`, mean-subtracted.
    pub images: Tensor<f32>,
    pub packs: Vec<TargetPack>,
    pub annotations: Vec<PoseAnnotation>,
}

/// Assembles a batch, augmenting each sample when `augmentation` is given.
pub fn make_batch<R: Rng>(
    samples: &[&Sample],
    skeleton: &SkeletonSpec,
    mean: &[f64; 3],
    scenario: OcclusionScenario,
    mut augmentation: Option<(&AugmentConfig, &mut R)>,
) -> Result<Batch> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let size = first.image.shape()[2];
    let side = size / OUTPUT_STRIDE;
    let grid = GridSpec::new(side, side, OUTPUT_STRIDE as f64);
    let mut images = Vec::with_capacity(samples.len());
    let mut packs = Vec::with_capacity(samples.len());
    let mut annotations = Vec::with_capacity(samples.len());
    for s in samples {
        let (image, ann) = match augmentation.as_mut() {
            Some((cfg, rng)) => {
                let p = sample_valid(*rng, cfg, &s.annotation, skeleton, size, 10);
                augment(&s.image, &s.annotation, skeleton, &p)?
            }
            None => (s.image.clone(), s.annotation.clone()),
        };
        packs.push(build_target_pack(&ann, skeleton, scenario, grid)?);
        images.push(normalize(&image, mean));
        annotations.push(ann);
    }
    Ok(Batch {
        images: Tensor::stack(&images)?,
        packs,
        annotations,
    })
}
