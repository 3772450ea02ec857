//! Synthetic scenes, annotation files, augmentation and normalization.

mod augment;
mod dataset;
mod io;
mod normalize;
mod synth;

pub use augment::{augment, augment_annotation, fraction_inside, sample_valid, warp_image, Affine, AugmentConfig, AugmentParams, MIN_INSIDE};
pub use dataset::{epoch_order, make_batch, scene_seeds, Batch, Dataset, Sample};
pub use io::{
    decode_png, decode_ppm, encode_png, encode_ppm, load_annotations, read_image, resolve_image, write_annotations, write_pgm,
    write_ppm, AnnotationRecord,
};
pub use normalize::{channel_mean, denormalize, normalize};
pub use synth::{check_skeleton, generate_scene, generate_scene_with, Rect, SyntheticScene, BONE_JITTER, DISTRACTOR_PROB};
