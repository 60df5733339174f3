use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Joint hierarchy in topological order: `parents[0]` is `None` (the root)
/// and every other joint's parent index is smaller than its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub offsets: Vec<[f64; 3]>,
    /// End-site offsets for leaf joints, kept for BVH output.
    #[serde(default)]
    pub end_sites: Vec<Option<[f64; 3]>>,
    /// Left/right joint pairs used by mirror augmentation.
    #[serde(default)]
    pub mirror_pairs: Option<Vec<(usize, usize)>>,
    /// Joint whose +z axis defines the gaze direction.
    #[serde(default)]
    pub head: Option<usize>,
}

/// Global joint transforms from forward kinematics.
#[derive(Debug, Clone)]
pub struct Pose {
    pub rotations: Vec<Matrix3<f64>>,
    pub positions: Vec<Vector3<f64>>,
}

impl Skeleton {
    pub fn new(
        names: Vec<String>,
        parents: Vec<Option<usize>>,
        offsets: Vec<[f64; 3]>,
    ) -> Result<Self> {
        let n = names.len();
        let end_sites = vec![None; n];
        let skel = Skeleton {
            names,
            parents,
            offsets,
            end_sites,
            mirror_pairs: None,
            head: None,
        };
        skel.validate()?;
        Ok(skel)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.names.len();
        if j == 0 {
            return Err(Error::structural("skeleton needs at least one joint"));
        }
        if self.parents.len() != j || self.offsets.len() != j || self.end_sites.len() != j {
            return Err(Error::structural(
                "skeleton names, parents, offsets and end sites differ in length",
            ));
        }
        if self.parents[0].is_some() {
            return Err(Error::structural("joint 0 must be the root"));
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < i => {}
                _ => {
                    return Err(Error::structural(format!(
                        "joint {i} has parent {p:?}; expected an earlier joint"
                    )))
                }
            }
        }
        if let Some(pairs) = &self.mirror_pairs {
            let mut seen = vec![false; j];
            for &(l, r) in pairs {
                if l >= j || r >= j || l == r || seen[l] || seen[r] {
                    return Err(Error::config(format!("invalid mirror pair ({l}, {r})")));
                }
                seen[l] = true;
                seen[r] = true;
            }
        }
        if let Some(h) = self.head {
            if h >= j {
                return Err(Error::structural(format!("head joint {h} out of range")));
            }
        }
        Ok(())
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.parents
            .iter()
            .enumerate()
            .filter(move |(_, p)| **p == Some(joint))
            .map(|(i, _)| i)
    }

    pub fn with_mirror_pairs(mut self, pairs: Vec<(usize, usize)>) -> Result<Self> {
        self.mirror_pairs = Some(pairs);
        self.validate()?;
        Ok(self)
    }

    /// Pairs joints whose names differ only in a Left/Right (or l_/r_) marker.
    pub fn infer_mirror_pairs(&self) -> Vec<(usize, usize)> {
        let swap = |name: &str| -> Option<String> {
            for (a, b) in [("Left", "Right"), ("left", "right"), ("l_", "r_"), ("L_", "R_")] {
                if let Some(rest) = name.strip_prefix(a) {
                    return Some(format!("{b}{rest}"));
                }
            }
            None
        };
        let mut pairs = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            if let Some(other) = swap(name) {
                if let Some(k) = self.names.iter().position(|n| *n == other) {
                    pairs.push((i, k));
                }
            }
        }
        pairs
    }

    /// Head joint for gaze: explicit, then by name, then the last joint.
    pub fn gaze_joint(&self) -> usize {
        self.head
            .or_else(|| {
                self.names
                    .iter()
                    .position(|n| n.to_ascii_lowercase().contains("head"))
            })
            .unwrap_or(self.joint_count() - 1)
    }

    /// Forward kinematics from parent-relative rotations. `translations`
    /// overrides the static offsets when a joint carries position channels.
    pub fn forward_kinematics(
        &self,
        root_position: &Vector3<f64>,
        local_rotations: &[Matrix3<f64>],
        translations: Option<&[Vector3<f64>]>,
    ) -> Result<Pose> {
        let j = self.joint_count();
        if local_rotations.len() != j {
            return Err(Error::structural(format!(
                "expected {j} joint rotations, got {}",
                local_rotations.len()
            )));
        }
        let mut rotations = Vec::with_capacity(j);
        let mut positions = Vec::with_capacity(j);
        for i in 0..j {
            match self.parents[i] {
                None => {
                    rotations.push(local_rotations[i]);
                    positions.push(*root_position);
                }
                Some(p) => {
                    let offset = match translations {
                        Some(t) => t[i],
                        None => Vector3::from(self.offsets[i]),
                    };
                    let pos = positions[p] + rotations[p] * offset;
                    let rot = rotations[p] * local_rotations[i];
                    rotations.push(rot);
                    positions.push(pos);
                }
            }
        }
        Ok(Pose {
            rotations,
            positions,
        })
    }

    /// Seven-joint upper-body rig used by the synthetic dataset:
    /// hips, spine, head, left arm/hand, right arm/hand. Y is up, Z forward,
    /// left is +X; arms point sideways in the rest pose.
    pub fn toy() -> Self {
        let names = ["Hips", "Spine", "Head", "LeftArm", "LeftHand", "RightArm", "RightHand"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let parents = vec![None, Some(0), Some(1), Some(1), Some(3), Some(1), Some(5)];
        let offsets = vec![
            [0.0, 0.0, 0.0],
            [0.0, 0.3, 0.0],
            [0.0, 0.25, 0.0],
            [0.2, 0.2, 0.0],
            [0.5, 0.0, 0.0],
            [-0.2, 0.2, 0.0],
            [-0.5, 0.0, 0.0],
        ];
        let mut skel = Skeleton::new(names, parents, offsets).expect("toy skeleton is valid");
        skel.end_sites[2] = Some([0.0, 0.1, 0.0]);
        skel.end_sites[4] = Some([0.1, 0.0, 0.0]);
        skel.end_sites[6] = Some([-0.1, 0.0, 0.0]);
        skel.head = Some(2);
        skel.with_mirror_pairs(vec![(3, 5), (4, 6)])
            .expect("toy mirror pairs are valid")
    }

    /// A chain of `j` joints; only useful for dimension checks and tests.
    pub fn chain(j: usize) -> Result<Self> {
        if j == 0 {
            return Err(Error::structural("skeleton needs at least one joint"));
        }
        let names = (0..j).map(|i| format!("joint{i}")).collect();
        let parents = (0..j).map(|i| i.checked_sub(1)).collect();
        let offsets = (0..j)
            .map(|i| if i == 0 { [0.0; 3] } else { [0.0, 0.1, 0.0] })
            .collect();
        Skeleton::new(names, parents, offsets)
    }
}
