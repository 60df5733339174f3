//! Skeletal motion: rotations, skeleton, per-frame features, augmentation and BVH.

pub mod augment;
pub mod bvh;
pub mod features;
pub mod rotation;
pub mod skeleton;

pub use augment::{
    crop_clips, length_ratio_augment, mirror_augment, resample_sequence, CLIP_FRAMES,
    DEFAULT_CROP_STRIDE, LENGTH_RATIOS, SEED_FRAMES,
};
pub use bvh::{export_bvh, Bvh};
pub use features::{
    compute_stats, denormalize, extract_features, normalize, recompute_velocities,
    FeatureLayout, FeatureStats, MotionSequence, FPS,
};
pub use rotation::{rotmat_to_6d, sixd_to_rotmat};
pub use skeleton::Skeleton;
