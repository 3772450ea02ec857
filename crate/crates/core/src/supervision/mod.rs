//! Target synthesis and the training loss.

mod annotation;
mod loss;
mod skeleton;
mod targets;

pub use annotation::{Person, PoseAnnotation};
pub use loss::{weighted_mse_loss, LossReport};
pub use skeleton::SkeletonSpec;
pub use targets::{
    balance_weights, build_target_pack, grid_cell, keypoint_gaussian, synth_keypoint_target, synth_part_target,
    GridSpec, OcclusionScenario, TargetPack, FOREGROUND_THRESHOLD, KEYPOINT_SIGMA, PART_SIGMA_MAJOR,
    PART_SIGMA_MINOR, PEAK, SUPPORT_FLOOR,
};
