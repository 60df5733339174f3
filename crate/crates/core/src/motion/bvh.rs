//! BVH (BioVision Hierarchy) reading and writing.
//!
//! The reader accepts any channel order; the writer always emits a root with
//! `Xposition Yposition Zposition Zrotation Yrotation Xrotation` and
//! `Zrotation Yrotation Xrotation` on every other joint, values printed with
//! six decimals so that write -> read -> write is byte-stable.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use ndarray::ArrayView2;

use super::features::{FeatureLayout, MotionSequence};
use super::rotation::{euler_to_rotmat, rotmat_to_euler_zyx, sixd_to_rotmat, Axis};
use super::skeleton::Skeleton;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Position(Axis),
    Rotation(Axis),
}

impl Channel {
    fn parse(s: &str) -> Result<Self> {
        let axis = match s.chars().next().map(|c| c.to_ascii_uppercase()) {
            Some('X') => Axis::X,
            Some('Y') => Axis::Y,
            Some('Z') => Axis::Z,
            _ => return Err(Error::format(format!("unknown BVH channel {s}"))),
        };
        match &s.to_ascii_lowercase()[1..] {
            "position" => Ok(Channel::Position(axis)),
            "rotation" => Ok(Channel::Rotation(axis)),
            _ => Err(Error::format(format!("unknown BVH channel {s}"))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Channel::Position(Axis::X) => "Xposition",
            Channel::Position(Axis::Y) => "Yposition",
            Channel::Position(Axis::Z) => "Zposition",
            Channel::Rotation(Axis::X) => "Xrotation",
            Channel::Rotation(Axis::Y) => "Yrotation",
            Channel::Rotation(Axis::Z) => "Zrotation",
        }
    }
}

/// A parsed BVH file: hierarchy, per-joint channel layout and raw motion rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Bvh {
    pub skeleton: Skeleton,
    pub channels: Vec<Vec<Channel>>,
    pub frame_time: f64,
    /// One row per frame, channels in joint order.
    pub motion: Vec<Vec<f64>>,
}

struct Tokens<'a> {
    inner: std::iter::Peekable<std::str::SplitWhitespace<'a>>,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Result<&'a str> {
        self.inner
            .next()
            .ok_or_else(|| Error::format("unexpected end of BVH file"))
    }

    fn expect(&mut self, want: &str) -> Result<()> {
        let got = self.next()?;
        if got.eq_ignore_ascii_case(want) {
            Ok(())
        } else {
            Err(Error::format(format!("expected `{want}`, found `{got}`")))
        }
    }

    fn number(&mut self) -> Result<f64> {
        let t = self.next()?;
        t.parse()
            .map_err(|_| Error::format(format!("expected a number, found `{t}`")))
    }

    fn vec3(&mut self) -> Result<[f64; 3]> {
        Ok([self.number()?, self.number()?, self.number()?])
    }
}

struct HierarchyBuilder {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<[f64; 3]>,
    end_sites: Vec<Option<[f64; 3]>>,
    channels: Vec<Vec<Channel>>,
}

impl HierarchyBuilder {
    fn joint(&mut self, t: &mut Tokens, parent: Option<usize>) -> Result<()> {
        let name = t.next()?.to_string();
        let index = self.names.len();
        self.names.push(name);
        self.parents.push(parent);
        self.end_sites.push(None);
        t.expect("{")?;
        t.expect("OFFSET")?;
        self.offsets.push(t.vec3()?);
        t.expect("CHANNELS")?;
        let count = t.number()? as usize;
        let channels = (0..count)
            .map(|_| Channel::parse(t.next()?))
            .collect::<Result<Vec<_>>>()?;
        self.channels.push(channels);
        loop {
            let tok = t.next()?;
            match tok {
                "}" => return Ok(()),
                "JOINT" => self.joint(t, Some(index))?,
                "End" => {
                    t.expect("Site")?;
                    t.expect("{")?;
                    t.expect("OFFSET")?;
                    self.end_sites[index] = Some(t.vec3()?);
                    t.expect("}")?;
                }
                other => {
                    return Err(Error::format(format!(
                        "unexpected `{other}` in joint block"
                    )))
                }
            }
        }
    }
}

impl Bvh {
    pub fn parse(text: &str) -> Result<Self> {
        let mut t = Tokens {
            inner: text.split_whitespace().peekable(),
        };
        t.expect("HIERARCHY")?;
        t.expect("ROOT")?;
        let mut b = HierarchyBuilder {
            names: Vec::new(),
            parents: Vec::new(),
            offsets: Vec::new(),
            end_sites: Vec::new(),
            channels: Vec::new(),
        };
        b.joint(&mut t, None)?;
        t.expect("MOTION")?;
        t.expect("Frames:")?;
        let frames = t.number()? as usize;
        t.expect("Frame")?;
        t.expect("Time:")?;
        let frame_time = t.number()?;
        let width: usize = b.channels.iter().map(Vec::len).sum();
        let mut motion = Vec::with_capacity(frames);
        for _ in 0..frames {
            motion.push((0..width).map(|_| t.number()).collect::<Result<Vec<_>>>()?);
        }
        if t.inner.peek().is_some() {
            return Err(Error::format("trailing data after MOTION block"));
        }
        let mut skeleton = Skeleton::new(b.names, b.parents, b.offsets)?;
        skeleton.end_sites = b.end_sites;
        let pairs = skeleton.infer_mirror_pairs();
        if !pairs.is_empty() {
            let mut uniq: Vec<(usize, usize)> =
                pairs.into_iter().filter(|(a, b)| a < b).collect();
            uniq.sort_unstable();
            skeleton.mirror_pairs = Some(uniq);
        }
        Ok(Bvh {
            skeleton,
            channels: b.channels,
            frame_time,
            motion,
        })
    }

    pub fn write(&self) -> String {
        let mut out = String::from("HIERARCHY\n");
        self.write_joint(&mut out, 0, 0);
        let _ = writeln!(out, "MOTION");
        let _ = writeln!(out, "Frames: {}", self.motion.len());
        let _ = writeln!(out, "Frame Time: {:.6}", self.frame_time);
        for row in &self.motion {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    fn write_joint(&self, out: &mut String, joint: usize, depth: usize) {
        let pad = "\t".repeat(depth);
        let keyword = if joint == 0 { "ROOT" } else { "JOINT" };
        let o = self.skeleton.offsets[joint];
        let _ = writeln!(out, "{pad}{keyword} {}", self.skeleton.names[joint]);
        let _ = writeln!(out, "{pad}{{");
        let _ = writeln!(out, "{pad}\tOFFSET {:.6} {:.6} {:.6}", o[0], o[1], o[2]);
        let names: Vec<&str> = self.channels[joint].iter().map(|c| c.name()).collect();
        let _ = writeln!(
            out,
            "{pad}\tCHANNELS {} {}",
            names.len(),
            names.join(" ")
        );
        let children: Vec<usize> = self.skeleton.children(joint).collect();
        for c in &children {
            self.write_joint(out, *c, depth + 1);
        }
        if children.is_empty() {
            let e = self.skeleton.end_sites[joint].unwrap_or([0.0; 3]);
            let _ = writeln!(out, "{pad}\tEnd Site");
            let _ = writeln!(out, "{pad}\t{{");
            let _ = writeln!(out, "{pad}\t\tOFFSET {:.6} {:.6} {:.6}", e[0], e[1], e[2]);
            let _ = writeln!(out, "{pad}\t}}");
        }
        let _ = writeln!(out, "{pad}}}");
    }

    /// Joint order in the MOTION rows: depth-first over the hierarchy.
    fn channel_order(&self) -> Vec<usize> {
        fn visit(s: &Skeleton, j: usize, out: &mut Vec<usize>) {
            out.push(j);
            for c in s.children(j) {
                visit(s, c, out);
            }
        }
        let mut order = Vec::with_capacity(self.skeleton.joint_count());
        visit(&self.skeleton, 0, &mut order);
        order
    }

    /// Converts channel values to root positions and joint rotations.
    pub fn to_motion(&self) -> Result<MotionSequence> {
        let j = self.skeleton.joint_count();
        let order = self.channel_order();
        let animated_translation = self.channels[1..]
            .iter()
            .any(|c| c.iter().any(|ch| matches!(ch, Channel::Position(_))));
        let mut root_positions = Vec::with_capacity(self.motion.len());
        let mut rotations = Vec::with_capacity(self.motion.len());
        let mut translations = Vec::new();
        for (f, row) in self.motion.iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("non-finite BVH value at frame {f}")));
            }
            let mut rots = vec![Matrix3::identity(); j];
            let mut trans: Vec<Vector3<f64>> =
                self.skeleton.offsets.iter().map(|o| Vector3::from(*o)).collect();
            let mut cursor = 0;
            for &joint in &order {
                let mut axes = Vec::new();
                let mut angles = Vec::new();
                let mut pos = Vector3::from(self.skeleton.offsets[joint]);
                for ch in &self.channels[joint] {
                    let v = row[cursor];
                    cursor += 1;
                    match ch {
                        Channel::Position(a) => pos[*a as usize] = v,
                        Channel::Rotation(a) => {
                            axes.push(*a);
                            angles.push(v);
                        }
                    }
                }
                rots[joint] = euler_to_rotmat(&axes, &angles);
                trans[joint] = pos;
            }
            root_positions.push(trans[0]);
            rotations.push(rots);
            if animated_translation {
                translations.push(trans);
            }
        }
        Ok(MotionSequence {
            root_positions,
            rotations,
            translations: animated_translation.then_some(translations),
        })
    }

    /// Builds a BVH from root positions and parent-relative rotations,
    /// using ZYX Euler channels.
    pub fn from_motion(skeleton: &Skeleton, motion: &MotionSequence, fps: f64) -> Result<Self> {
        let j = skeleton.joint_count();
        let mut bvh = Bvh {
            skeleton: skeleton.clone(),
            channels: Vec::with_capacity(j),
            frame_time: 1.0 / fps,
            motion: Vec::with_capacity(motion.frame_count()),
        };
        let rot = [
            Channel::Rotation(Axis::Z),
            Channel::Rotation(Axis::Y),
            Channel::Rotation(Axis::X),
        ];
        for i in 0..j {
            let mut c = Vec::new();
            if i == 0 {
                c.extend([
                    Channel::Position(Axis::X),
                    Channel::Position(Axis::Y),
                    Channel::Position(Axis::Z),
                ]);
            }
            c.extend(rot);
            bvh.channels.push(c);
        }
        let order = bvh.channel_order();
        for f in 0..motion.frame_count() {
            let mut row = Vec::with_capacity(3 + 3 * j);
            let p = motion.root_positions[f];
            let finite = p.iter().all(|v| v.is_finite())
                && motion.rotations[f].iter().all(|r| r.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(Error::numeric(format!("non-finite pose at frame {f}")));
            }
            for &joint in &order {
                if joint == 0 {
                    row.extend(p.iter().copied());
                }
                row.extend(rotmat_to_euler_zyx(&motion.rotations[f][joint]));
            }
            bvh.motion.push(row);
        }
        Ok(bvh)
    }
}

/// Turns (denormalized) feature frames back into a BVH: root position from
/// the root block, joint rotations from the 6D block.
pub fn export_bvh(frames: ArrayView2<f64>, skeleton: &Skeleton, fps: f64) -> Result<Bvh> {
    let layout = FeatureLayout::new(skeleton.joint_count());
    if frames.ncols() != layout.dim() {
        return Err(Error::structural(format!(
            "expected {} feature columns, got {}",
            layout.dim(),
            frames.ncols()
        )));
    }
    let mut root_positions = Vec::with_capacity(frames.nrows());
    let mut rotations = Vec::with_capacity(frames.nrows());
    for (f, row) in frames.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite pose at frame {f}")));
        }
        root_positions.push(Vector3::new(row[0], row[1], row[2]));
        let rots = (0..layout.joints)
            .map(|i| {
                let v: Vec<f64> = layout.joint_rot(i).map(|k| row[k]).collect();
                sixd_to_rotmat(&v)
                    .map_err(|e| Error::numeric(format!("frame {f}, joint {i}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        rotations.push(rots);
    }
    Bvh::from_motion(
        skeleton,
        &MotionSequence {
            root_positions,
            rotations,
            translations: None,
        },
        fps,
    )
}
