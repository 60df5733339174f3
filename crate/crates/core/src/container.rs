//! Binary file formats.
//!
//! Feature cache (`GDK1`), little-endian:
//!
//! | field        | type            |
//! |--------------|-----------------|
//! | magic        | `b"GDK1"`       |
//! | version      | u32 (= 1)       |
//! | joints       | u32             |
//! | clip frames  | u32             |
//! | frame count  | u64             |
//! | dim          | u32             |
//! | data         | f32 x rows*dim  |
//! | has stats    | u8              |
//! | mean, std    | f64 x dim each  |
//!
//! Checkpoint (`GDCK`): magic, u32 version, u64 header length, JSON header,
//! then each tensor listed in the header as little-endian f32 in order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use candle_core::DType;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::SourceKind;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{NoiseSchedule, ScheduleParams};
use crate::error::{Error, Result};
use crate::motion::{FeatureStats, Skeleton};
use crate::train::TrainConfig;

pub const CACHE_MAGIC: &[u8; 4] = b"GDK1";
pub const CACHE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes via a temporary sibling file and renames it into place.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::format(format!("truncated file: {e}")))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::format(format!("truncated data block: {e}")))?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4], what: &str) -> Result<()> {
    let m: [u8; 4] = read_array(r)?;
    if &m != magic {
        return Err(Error::format(format!("not a {what} file (bad magic {m:?})")));
    }
    Ok(())
}

/// A matrix of per-frame features with optional normalization statistics.
/// Audio caches use `joints = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub joints: u32,
    pub clip_frames: u32,
    pub data: Array2<f32>,
    pub stats: Option<FeatureStats>,
}

impl FeatureCache {
    pub fn from_f64(joints: usize, clip_frames: usize, data: &Array2<f64>, stats: Option<FeatureStats>) -> Self {
        Self {
            joints: joints as u32,
            clip_frames: clip_frames as u32,
            data: data.mapv(|v| v as f32),
            stats,
        }
    }

    pub fn to_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let (rows, dim) = self.data.dim();
        if let Some(s) = &self.stats {
            if s.dim() != dim {
                return Err(Error::structural("cache stats width differs from data width"));
            }
        }
        atomic_write(path, |w| {
            w.write_all(CACHE_MAGIC)?;
            w.write_all(&CACHE_VERSION.to_le_bytes())?;
            w.write_all(&self.joints.to_le_bytes())?;
            w.write_all(&self.clip_frames.to_le_bytes())?;
            w.write_all(&(rows as u64).to_le_bytes())?;
            w.write_all(&(dim as u32).to_le_bytes())?;
            for v in self.data.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            match &self.stats {
                None => w.write_all(&[0])?,
                Some(s) => {
                    w.write_all(&[1])?;
                    for v in s.mean.iter().chain(&s.std) {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            Ok(())
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        check_magic(&mut r, CACHE_MAGIC, "feature cache")?;
        let version = read_u32(&mut r)?;
        if version != CACHE_VERSION {
            return Err(Error::format(format!(
                "feature cache version {version} is not supported (expected {CACHE_VERSION})"
            )));
        }
        let joints = read_u32(&mut r)?;
        let clip_frames = read_u32(&mut r)?;
        let rows = read_u64(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        if joints > 0 && dim != 16 + 15 * joints as usize {
            return Err(Error::format(format!("cache width {dim} does not fit {joints} joints")));
        }
        let values = read_f32s(&mut r, rows * dim)?;
        let data = Array2::from_shape_vec((rows, dim), values).map_err(|e| Error::format(e.to_string()))?;
        let [flag] = read_array::<1>(&mut r)?;
        let stats = match flag {
            0 => None,
            1 => {
                let mut v = Vec::with_capacity(2 * dim);
                for _ in 0..2 * dim {
                    v.push(f64::from_le_bytes(read_array(&mut r)?));
                }
                let std = v.split_off(dim);
                Some(FeatureStats { mean: v, std })
            }
            other => return Err(Error::format(format!("bad stats flag {other}"))),
        };
        Ok(Self {
            joints,
            clip_frames,
            data,
            stats,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Everything needed to rebuild a trained model and sample from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: DenoiserConfig,
    pub schedule: ScheduleParams,
    pub source_kind: SourceKind,
    pub styles: Vec<String>,
    pub skeleton: Skeleton,
    pub stats: FeatureStats,
    pub audio_stats: FeatureStats,
    pub train: Option<TrainConfig>,
    pub steps: usize,
    pub samples_seen: usize,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub weights: Vec<Vec<f32>>,
}

/// Metadata stored next to the weights.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub schedule: ScheduleParams,
    pub source_kind: SourceKind,
    pub styles: Vec<String>,
    pub skeleton: Skeleton,
    pub stats: FeatureStats,
    pub audio_stats: FeatureStats,
    pub train: Option<TrainConfig>,
    pub steps: usize,
    pub samples_seen: usize,
}

impl Checkpoint {
    pub fn from_model(model: &Denoiser, meta: CheckpointMeta) -> Result<Self> {
        if meta.styles.len() != model.config().style_count {
            return Err(Error::structural("style labels do not match the model's style count"));
        }
        if meta.schedule.steps != model.config().diffusion_steps {
            return Err(Error::structural("schedule length does not match the model"));
        }
        let exported = model.params().export()?;
        let tensors = exported
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect();
        let weights = exported.into_iter().map(|(_, _, w)| w).collect();
        Ok(Self {
            header: CheckpointHeader {
                model: model.config().clone(),
                schedule: meta.schedule,
                source_kind: meta.source_kind,
                styles: meta.styles,
                skeleton: meta.skeleton,
                stats: meta.stats,
                audio_stats: meta.audio_stats,
                train: meta.train,
                steps: meta.steps,
                samples_seen: meta.samples_seen,
                tensors,
            },
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        atomic_write(path, |w| {
            w.write_all(CHECKPOINT_MAGIC)?;
            w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for t in &self.weights {
                for v in t {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        check_magic(&mut r, CHECKPOINT_MAGIC, "checkpoint")?;
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = read_u64(&mut r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|e| Error::format(format!("truncated checkpoint header: {e}")))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let weights = header
            .tensors
            .iter()
            .map(|t| read_f32s(&mut r, t.shape.iter().product()))
            .collect::<Result<Vec<_>>>()?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::format(format!("{} trailing bytes after checkpoint data", rest.len())));
        }
        Ok(Self { header, weights })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_params(self.header.schedule)
    }

    /// Rebuilds the denoiser with the stored weights.
    pub fn build_model(&self, dtype: DType) -> Result<Denoiser> {
        let model = Denoiser::new(self.header.model.clone(), dtype, 0)?;
        let values: HashMap<String, (Vec<usize>, Vec<f32>)> = self
            .header
            .tensors
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| (t.name.clone(), (t.shape.clone(), w.clone())))
            .collect();
        model.params().import(&values)?;
        Ok(model)
    }
}
