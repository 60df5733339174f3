//! Data augmentation and clip cropping on feature matrices.

use ndarray::{s, Array2, ArrayView2};

use super::features::{recompute_velocities, FeatureLayout};
use super::rotation::orthonormalize_6d;
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

/// Seed frames at the start of every training clip.
pub const SEED_FRAMES: usize = 8;
/// Generated frames per clip (4 s at 20 fps).
pub const CLIP_FRAMES: usize = 80;
pub const DEFAULT_CROP_STRIDE: usize = 40;
pub const LENGTH_RATIOS: [f64; 3] = [0.9, 1.0, 1.1];

// Reflection across the sagittal (x = 0) plane, applied per block type.
fn mirror_vector(v: [f64; 3]) -> [f64; 3] {
    [-v[0], v[1], v[2]]
}

// log(S R S) = -S log(R) S for a pseudovector
fn mirror_axial(v: [f64; 3]) -> [f64; 3] {
    [v[0], -v[1], -v[2]]
}

fn mirror_6d(v: [f64; 6]) -> [f64; 6] {
    // columns of S R S: -S c1 and S c2
    [v[0], -v[1], -v[2], -v[3], v[4], v[5]]
}

fn mirror_quat(q: [f64; 4]) -> [f64; 4] {
    [q[0], q[1], -q[2], -q[3]]
}

fn read<const N: usize>(row: &ndarray::ArrayView1<f64>, start: usize) -> [f64; N] {
    std::array::from_fn(|k| row[start + k])
}

/// Reflects a feature sequence left-to-right: x components flip, paired
/// left/right joints swap, rotations are conjugated by the reflection.
pub fn mirror_augment(frames: ArrayView2<f64>, skeleton: &Skeleton) -> Result<Array2<f64>> {
    let pairs = skeleton
        .mirror_pairs
        .as_ref()
        .ok_or_else(|| Error::config("skeleton has no left/right pairing table"))?;
    let layout = FeatureLayout::new(skeleton.joint_count());
    if frames.ncols() != layout.dim() {
        return Err(Error::structural(format!(
            "expected {} feature columns, got {}",
            layout.dim(),
            frames.ncols()
        )));
    }
    let mut partner: Vec<usize> = (0..layout.joints).collect();
    for &(l, r) in pairs {
        partner[l] = r;
        partner[r] = l;
    }
    let mut out = Array2::zeros(frames.raw_dim());
    for (src, mut dst) in frames.rows().into_iter().zip(out.rows_mut()) {
        let mut put = |start: usize, vals: &[f64]| {
            for (k, v) in vals.iter().enumerate() {
                dst[start + k] = *v;
            }
        };
        put(0, &mirror_vector(read(&src, layout.root_pos().start)));
        put(3, &mirror_quat(read(&src, layout.root_rot().start)));
        put(7, &mirror_vector(read(&src, layout.root_vel().start)));
        put(10, &mirror_axial(read(&src, layout.root_ang_vel().start)));
        for (i, &from) in partner.iter().enumerate() {
            put(
                layout.joint_pos(i).start,
                &mirror_vector(read(&src, layout.joint_pos(from).start)),
            );
            put(
                layout.joint_rot(i).start,
                &mirror_6d(read(&src, layout.joint_rot(from).start)),
            );
            put(
                layout.joint_vel(i).start,
                &mirror_vector(read(&src, layout.joint_vel(from).start)),
            );
            put(
                layout.joint_ang_vel(i).start,
                &mirror_axial(read(&src, layout.joint_ang_vel(from).start)),
            );
        }
        put(
            layout.gaze().start,
            &mirror_vector(read(&src, layout.gaze().start)),
        );
    }
    Ok(out)
}

/// Time-stretches a feature sequence to `round(len * ratio)` frames by linear
/// interpolation. Rotations are re-projected onto valid rotations and all
/// velocity blocks are recomputed at the new rate.
pub fn resample_sequence(
    frames: ArrayView2<f64>,
    layout: &FeatureLayout,
    ratio: f64,
) -> Result<Array2<f64>> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::validation(format!("invalid length ratio {ratio}")));
    }
    let n = frames.nrows();
    if n == 0 {
        return Err(Error::validation("cannot resample an empty sequence"));
    }
    let target = ((n as f64) * ratio).round() as usize;
    if target == n {
        return Ok(frames.to_owned());
    }
    if target == 0 {
        return Err(Error::validation("length ratio collapses the sequence"));
    }
    let mut out = Array2::zeros((target, frames.ncols()));
    for k in 0..target {
        let pos = if target == 1 {
            0.0
        } else {
            k as f64 * (n - 1) as f64 / (target - 1) as f64
        };
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let w = pos - lo as f64;
        let a = frames.row(lo);
        let b = frames.row(hi);
        let mut row = out.row_mut(k);
        for c in 0..frames.ncols() {
            row[c] = a[c] + (b[c] - a[c]) * w;
        }
        let q: Vec<f64> = layout.root_rot().map(|c| row[c]).collect();
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (c, v) in layout.root_rot().zip(q) {
            row[c] = v / qn;
        }
        for i in 0..layout.joints {
            let r = layout.joint_rot(i);
            let v: Vec<f64> = r.clone().map(|c| row[c]).collect();
            for (c, v) in r.zip(orthonormalize_6d(&v)?) {
                row[c] = v;
            }
        }
        let g = layout.gaze();
        let gn = g.clone().map(|c| row[c] * row[c]).sum::<f64>().sqrt();
        if gn > 1e-12 {
            for c in g {
                row[c] /= gn;
            }
        }
    }
    recompute_velocities(&mut out, layout)?;
    Ok(out)
}

/// Length-ratio augmentation of one clip: stretch, recompute velocities,
/// then take the first `clip_len` frames. Returns `None` (with a warning)
/// when the stretched clip is too short.
pub fn length_ratio_augment(
    clip: ArrayView2<f64>,
    layout: &FeatureLayout,
    ratio: f64,
    clip_len: usize,
) -> Result<Option<Array2<f64>>> {
    let stretched = resample_sequence(clip, layout, ratio)?;
    if stretched.nrows() < clip_len {
        log::warn!(
            "length ratio {ratio} gives {} frames, fewer than {clip_len}; skipping",
            stretched.nrows()
        );
        return Ok(None);
    }
    Ok(Some(stretched.slice(s![..clip_len, ..]).to_owned()))
}

/// Cuts fixed-length windows of `clip_len` frames every `stride` frames.
pub fn crop_clips(
    frames: ArrayView2<f64>,
    clip_len: usize,
    stride: usize,
) -> Result<Vec<Array2<f64>>> {
    if stride == 0 || clip_len == 0 {
        return Err(Error::validation("clip length and stride must be positive"));
    }
    if frames.nrows() < clip_len {
        log::warn!(
            "sequence of {} frames is shorter than one clip ({clip_len}); no clips",
            frames.nrows()
        );
        return Ok(Vec::new());
    }
    Ok(crop_starts(frames.nrows(), clip_len, stride)
        .map(|s| frames.slice(s![s..s + clip_len, ..]).to_owned())
        .collect())
}

/// Start frames of the windows `crop_clips` produces.
pub fn crop_starts(len: usize, clip_len: usize, stride: usize) -> impl Iterator<Item = usize> {
    let last = len.checked_sub(clip_len);
    (0..).map(move |k| k * stride).take_while(move |s| last.is_some_and(|l| *s <= l))
}
