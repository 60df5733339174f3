//! Per-frame gesture feature vectors.
//!
//! Each frame is laid out as
//! `[root pos 3, root quat 4, root vel 3, root ang vel 3,
//!   joint pos 3j, joint rot 6D 6j, joint vel 3j, joint ang vel 3j, gaze 3]`
//! for a total of `16 + 15j` values. Joint positions are expressed in the
//! root's frame relative to the root; joint rotations are parent-relative.
//! Velocities are per frame (the timeline is 20 fps).

use std::ops::Range;

use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::rotation::{
    angular_velocity, quat_to_rotmat, rotmat_to_6d, rotmat_to_quat, sixd_to_rotmat,
};
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

pub const FPS: f64 = 20.0;

/// Standard deviations below this are clamped during normalization.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub joints: usize,
}

impl FeatureLayout {
    pub fn new(joints: usize) -> Self {
        Self { joints }
    }

    pub fn dim(&self) -> usize {
        16 + 15 * self.joints
    }

    pub fn root_pos(&self) -> Range<usize> {
        0..3
    }
    pub fn root_rot(&self) -> Range<usize> {
        3..7
    }
    pub fn root_vel(&self) -> Range<usize> {
        7..10
    }
    pub fn root_ang_vel(&self) -> Range<usize> {
        10..13
    }
    pub fn joint_pos_block(&self) -> Range<usize> {
        13..13 + 3 * self.joints
    }
    pub fn joint_rot_block(&self) -> Range<usize> {
        let s = self.joint_pos_block().end;
        s..s + 6 * self.joints
    }
    pub fn joint_vel_block(&self) -> Range<usize> {
        let s = self.joint_rot_block().end;
        s..s + 3 * self.joints
    }
    pub fn joint_ang_vel_block(&self) -> Range<usize> {
        let s = self.joint_vel_block().end;
        s..s + 3 * self.joints
    }
    pub fn gaze(&self) -> Range<usize> {
        let s = self.joint_ang_vel_block().end;
        s..s + 3
    }

    pub fn joint_pos(&self, j: usize) -> Range<usize> {
        let s = self.joint_pos_block().start + 3 * j;
        s..s + 3
    }
    pub fn joint_rot(&self, j: usize) -> Range<usize> {
        let s = self.joint_rot_block().start + 6 * j;
        s..s + 6
    }
    pub fn joint_vel(&self, j: usize) -> Range<usize> {
        let s = self.joint_vel_block().start + 3 * j;
        s..s + 3
    }
    pub fn joint_ang_vel(&self, j: usize) -> Range<usize> {
        let s = self.joint_ang_vel_block().start + 3 * j;
        s..s + 3
    }
}

/// Raw motion: root trajectory plus parent-relative joint rotations
/// (the root's entry is its global rotation).
#[derive(Debug, Clone)]
pub struct MotionSequence {
    pub root_positions: Vec<Vector3<f64>>,
    pub rotations: Vec<Vec<Matrix3<f64>>>,
    /// Per-frame joint translations when the source animates them.
    pub translations: Option<Vec<Vec<Vector3<f64>>>>,
}

impl MotionSequence {
    pub fn frame_count(&self) -> usize {
        self.root_positions.len()
    }
}

/// Computes the feature matrix (frames x `16 + 15j`) for a motion sampled at 20 fps.
pub fn extract_features(
    motion: &MotionSequence,
    skeleton: &Skeleton,
    gaze_target: Option<Vector3<f64>>,
) -> Result<Array2<f64>> {
    let j = skeleton.joint_count();
    let n = motion.frame_count();
    if motion.rotations.len() != n {
        return Err(Error::structural(format!(
            "{n} root positions but {} rotation frames",
            motion.rotations.len()
        )));
    }
    if let Some(t) = &motion.translations {
        if t.len() != n || t.iter().any(|f| f.len() != j) {
            return Err(Error::structural("translation channels do not match skeleton"));
        }
    }
    for (f, rots) in motion.rotations.iter().enumerate() {
        if rots.len() != j {
            return Err(Error::structural(format!(
                "frame {f} has {} joint rotations, skeleton has {j}",
                rots.len()
            )));
        }
        let finite = motion.root_positions[f].iter().all(|v| v.is_finite())
            && rots.iter().all(|r| r.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::validation(format!("non-finite motion at frame {f}")));
        }
    }
    if let Some(g) = gaze_target {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("non-finite gaze target"));
        }
    }

    let layout = FeatureLayout::new(j);
    let head = skeleton.gaze_joint();
    let mut out = Array2::<f64>::zeros((n, layout.dim()));
    let mut prev_quat: Option<[f64; 4]> = None;
    for f in 0..n {
        let translations = motion.translations.as_ref().map(|t| t[f].as_slice());
        let pose = skeleton.forward_kinematics(
            &motion.root_positions[f],
            &motion.rotations[f],
            translations,
        )?;
        let mut row = out.row_mut(f);
        let root_rot = pose.rotations[0];
        let root_pos = pose.positions[0];
        for k in 0..3 {
            row[k] = root_pos[k];
        }
        let mut q = rotmat_to_quat(&root_rot);
        if let Some(p) = prev_quat {
            if q.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                q.iter_mut().for_each(|v| *v = -*v);
            }
        }
        prev_quat = Some(q);
        for (k, v) in layout.root_rot().zip(q) {
            row[k] = v;
        }
        for i in 0..j {
            let local = root_rot.transpose() * (pose.positions[i] - root_pos);
            for (k, v) in layout.joint_pos(i).zip(local.iter()) {
                row[k] = *v;
            }
            for (k, v) in layout.joint_rot(i).zip(rotmat_to_6d(&motion.rotations[f][i])) {
                row[k] = v;
            }
        }
        let head_axis = pose.rotations[head] * Vector3::z();
        let gaze = match gaze_target {
            Some(target) => {
                let d = target - pose.positions[head];
                if d.norm() > 1e-12 {
                    d.normalize()
                } else {
                    head_axis
                }
            }
            None => head_axis,
        };
        for (k, v) in layout.gaze().zip(gaze.normalize().iter()) {
            row[k] = *v;
        }
    }
    let root_rots: Vec<Matrix3<f64>> = motion.rotations.iter().map(|r| r[0]).collect();
    fill_velocities(&mut out, &layout, &root_rots, &motion.rotations);
    Ok(out)
}

/// Central difference at interior frames, one-sided at the ends.
fn difference_pairs(n: usize) -> impl Iterator<Item = (usize, usize, usize, f64)> {
    (0..n).map(move |f| {
        if n < 2 {
            (f, f, f, 1.0)
        } else if f == 0 {
            (f, 0, 1, 1.0)
        } else if f == n - 1 {
            (f, n - 2, n - 1, 1.0)
        } else {
            (f, f - 1, f + 1, 2.0)
        }
    })
}

fn fill_velocities(
    frames: &mut Array2<f64>,
    layout: &FeatureLayout,
    root_rots: &[Matrix3<f64>],
    joint_rots: &[Vec<Matrix3<f64>>],
) {
    let n = frames.nrows();
    let j = layout.joints;
    let mut position_blocks = vec![(layout.root_pos(), layout.root_vel())];
    position_blocks.extend((0..j).map(|i| (layout.joint_pos(i), layout.joint_vel(i))));
    for (f, a, b, span) in difference_pairs(n) {
        for (src, dst) in &position_blocks {
            for (s, d) in src.clone().zip(dst.clone()) {
                frames[(f, d)] = if a == b {
                    0.0
                } else {
                    (frames[(b, s)] - frames[(a, s)]) / span
                };
            }
        }
        let w = angular_velocity(&root_rots[a], &root_rots[b], span);
        for (k, v) in layout.root_ang_vel().zip(w.iter()) {
            frames[(f, k)] = *v;
        }
        for i in 0..j {
            let w = angular_velocity(&joint_rots[a][i], &joint_rots[b][i], span);
            for (k, v) in layout.joint_ang_vel(i).zip(w.iter()) {
                frames[(f, k)] = *v;
            }
        }
    }
}

/// Decodes the root and joint rotation matrices stored in a feature matrix.
pub fn decode_rotations(
    frames: ArrayView2<f64>,
    layout: &FeatureLayout,
) -> Result<(Vec<Matrix3<f64>>, Vec<Vec<Matrix3<f64>>>)> {
    let mut roots = Vec::with_capacity(frames.nrows());
    let mut joints = Vec::with_capacity(frames.nrows());
    for row in frames.rows() {
        let q: Vec<f64> = layout.root_rot().map(|k| row[k]).collect();
        roots.push(quat_to_rotmat(&q)?);
        let mut per_joint = Vec::with_capacity(layout.joints);
        for i in 0..layout.joints {
            let v: Vec<f64> = layout.joint_rot(i).map(|k| row[k]).collect();
            per_joint.push(sixd_to_rotmat(&v)?);
        }
        joints.push(per_joint);
    }
    Ok((roots, joints))
}

/// Recomputes every velocity block from the positions and rotations
/// already present in `frames`.
pub fn recompute_velocities(frames: &mut Array2<f64>, layout: &FeatureLayout) -> Result<()> {
    let (roots, joints) = decode_rotations(frames.view(), layout)?;
    fill_velocities(frames, layout, &roots, &joints);
    Ok(())
}

/// Per-dimension normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean over the first `rows` frames is just the mean frame repeated.
    pub fn mean_frames(&self, rows: usize) -> Array2<f64> {
        let mean = Array1::from(self.mean.clone());
        let mut out = Array2::zeros((rows, self.dim()));
        out.rows_mut().into_iter().for_each(|mut r| r.assign(&mean));
        out
    }
}

/// Mean and (population) standard deviation over all rows of all inputs.
/// Degenerate dimensions get `STD_FLOOR`.
pub fn compute_stats<'a, I>(clips: I) -> Result<FeatureStats>
where
    I: IntoIterator<Item = ArrayView2<'a, f64>>,
{
    let clips: Vec<ArrayView2<f64>> = clips.into_iter().collect();
    let dim = clips
        .first()
        .map(|c| c.ncols())
        .ok_or_else(|| Error::validation("cannot compute statistics of an empty set"))?;
    if clips.iter().any(|c| c.ncols() != dim) {
        return Err(Error::structural("clips disagree on feature dimension"));
    }
    let count: usize = clips.iter().map(|c| c.nrows()).sum();
    if count == 0 {
        return Err(Error::validation("cannot compute statistics of zero frames"));
    }
    let mut mean = Array1::<f64>::zeros(dim);
    for c in &clips {
        mean += &c.sum_axis(Axis(0));
    }
    mean /= count as f64;
    let mut var = Array1::<f64>::zeros(dim);
    for c in &clips {
        for row in c.rows() {
            let d = &row - &mean;
            var += &(&d * &d);
        }
    }
    var /= count as f64;
    let mut clamped = 0usize;
    let std: Vec<f64> = var
        .iter()
        .map(|v| {
            let s = v.sqrt();
            if s < STD_FLOOR {
                clamped += 1;
                STD_FLOOR
            } else {
                s
            }
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} of {dim} feature dimensions have near-zero variance; std clamped to {STD_FLOOR}");
    }
    Ok(FeatureStats {
        mean: mean.to_vec(),
        std,
    })
}

fn check_dim(frames: &ArrayView2<f64>, stats: &FeatureStats) -> Result<()> {
    if frames.ncols() != stats.dim() {
        return Err(Error::structural(format!(
            "frames have {} columns, statistics have {}",
            frames.ncols(),
            stats.dim()
        )));
    }
    Ok(())
}

pub fn normalize(frames: ArrayView2<f64>, stats: &FeatureStats) -> Result<Array2<f64>> {
    check_dim(&frames, stats)?;
    let mut out = frames.to_owned();
    for mut row in out.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[k]) / stats.std[k];
        }
    }
    Ok(out)
}

pub fn denormalize(frames: ArrayView2<f64>, stats: &FeatureStats) -> Result<Array2<f64>> {
    check_dim(&frames, stats)?;
    let mut out = frames.to_owned();
    for mut row in out.rows_mut() {
        for (k, v) in row.iter_mut().enumerate() {
            *v = *v * stats.std[k] + stats.mean[k];
        }
    }
    Ok(out)
}
