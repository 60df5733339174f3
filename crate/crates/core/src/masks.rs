//! Attention patterns and relative-position bias.
//!
//! Positions are grouped into consecutive blocks of `window` frames
//! (the last block may be partial). Rules for query `i`, key `j`:
//!
//! | kind             | allowed when                                  |
//! |------------------|-----------------------------------------------|
//! | `Full`           | always                                        |
//! | `SlidingWindow`  | `|i - j| <= window / 2`                       |
//! | `CrossLocal`     | `block(j)` is `block(i)` or the block before  |
//! | `ForwardLocal`   | cross-local, plus the block after             |

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive value for blocked cells.
pub const BLOCKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    SlidingWindow,
    CrossLocal,
    ForwardLocal,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [
        MaskKind::Full,
        MaskKind::SlidingWindow,
        MaskKind::CrossLocal,
        MaskKind::ForwardLocal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Full => "full",
            MaskKind::SlidingWindow => "sliding_window",
            MaskKind::CrossLocal => "cross_local",
            MaskKind::ForwardLocal => "forward_local",
        }
    }
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown mask kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    kind: MaskKind,
    size: usize,
    window: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn build(kind: MaskKind, size: usize, window: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::validation("mask size must be at least 1"));
        }
        if kind != MaskKind::Full && window == 0 {
            return Err(Error::validation("local attention needs a window of at least 1"));
        }
        if kind != MaskKind::Full && window > size {
            log::debug!("window {window} exceeds sequence length {size}; single block");
        }
        let block = |p: usize| p / window.max(1);
        let half = window / 2;
        let mut allowed = vec![false; size * size];
        for i in 0..size {
            for j in 0..size {
                allowed[i * size + j] = match kind {
                    MaskKind::Full => true,
                    MaskKind::SlidingWindow => i.abs_diff(j) <= half,
                    MaskKind::CrossLocal => block(j) <= block(i) && block(j) + 1 >= block(i),
                    MaskKind::ForwardLocal => block(i).abs_diff(block(j)) <= 1,
                };
            }
        }
        Ok(Self {
            kind,
            size,
            window,
            allowed,
        })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.size + j]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|a| **a).count()
    }

    /// Row-major 0/1 grid.
    pub fn grid(&self) -> Vec<Vec<u8>> {
        (0..self.size)
            .map(|i| (0..self.size).map(|j| self.is_allowed(i, j) as u8).collect())
            .collect()
    }

    pub fn additive(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.size, self.size, |i, j| {
            if self.is_allowed(i, j) {
                0.0
            } else {
                BLOCKED
            }
        })
    }

    /// `[L, L]` additive mask in `f64` on `device`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<f64> = self
            .allowed
            .iter()
            .map(|a| if *a { 0.0 } else { BLOCKED })
            .collect();
        Ok(Tensor::from_vec(v, (self.size, self.size), device)?)
    }
}

pub fn build_mask(kind: MaskKind, size: usize, window: usize) -> Result<AttentionMask> {
    AttentionMask::build(kind, size, window)
}

/// `bias[i][j] = table[clip(i - j, -R, R) + R]`.
pub fn rpe_bias(size: usize, radius: usize, table: &[f64]) -> Result<DMatrix<f64>> {
    if table.len() != 2 * radius + 1 {
        return Err(Error::structural(format!(
            "relative-position table needs {} entries, got {}",
            2 * radius + 1,
            table.len()
        )));
    }
    Ok(DMatrix::from_fn(size, size, |i, j| table[rpe_index(i, j, radius)]))
}

pub fn rpe_index(i: usize, j: usize, radius: usize) -> usize {
    let r = radius as i64;
    ((i as i64 - j as i64).clamp(-r, r) + r) as usize
}

/// Flat `[L * L]` table indices, row-major, for gathering a learned bias.
pub fn rpe_indices(size: usize, radius: usize) -> Vec<u32> {
    (0..size)
        .flat_map(|i| (0..size).map(move |j| rpe_index(i, j, radius) as u32))
        .collect()
}

/// Reference single-head attention `softmax((Q K^T + M + B) / sqrt(C)) V`
/// on dense matrices. Returns `(output, weights)`.
pub fn attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mask: &AttentionMask,
    bias: Option<&DMatrix<f64>>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let l = q.nrows();
    if k.nrows() != l || v.nrows() != l || mask.size() != l || q.ncols() != k.ncols() {
        return Err(Error::structural("attention inputs disagree in shape"));
    }
    let c = q.ncols() as f64;
    let mut logits = q * k.transpose() + mask.additive();
    if let Some(b) = bias {
        logits += b;
    }
    logits /= c.sqrt();
    let mut weights = DMatrix::zeros(l, l);
    for i in 0..l {
        let row = logits.row(i);
        let m = row.max();
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..l {
            weights[(i, j)] = e[j] / s;
        }
    }
    Ok((&weights * v, weights))
}
