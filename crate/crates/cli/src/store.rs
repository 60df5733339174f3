//! On-disk dataset directory: `dataset.json` plus one gesture and one audio
//! feature cache per sequence.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gdk_core::audio::SourceKind;
use gdk_core::container::{atomic_write, FeatureCache};
use gdk_core::data::{Dataset, Sequence, Split};
use gdk_core::motion::{Skeleton, CLIP_FRAMES, FPS};
use serde::{Deserialize, Serialize};

pub const INDEX_FILE: &str = "dataset.json";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub name: String,
    pub style: usize,
    pub frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub version: u32,
    pub fps: f64,
    pub styles: Vec<String>,
    pub source_kind: SourceKind,
    pub skeleton: Skeleton,
    pub sequences: Vec<SequenceEntry>,
    pub split: Split,
}

fn gesture_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.gesture.gdk"))
}

fn audio_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.audio.gdk"))
}

/// Writes the dataset; returns every file written.
pub fn write_dataset(dir: &Path, ds: &Dataset, split: &Split) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let joints = ds.skeleton.joint_count();
    let mut written = Vec::new();
    for seq in &ds.sequences {
        let g = gesture_path(dir, &seq.name);
        FeatureCache::from_f64(joints, CLIP_FRAMES, &seq.gestures, None).write(&g)?;
        let a = audio_path(dir, &seq.name);
        FeatureCache::from_f64(0, CLIP_FRAMES, &seq.audio, None).write(&a)?;
        written.extend([g, a]);
    }
    let index = DatasetIndex {
        version: INDEX_VERSION,
        fps: FPS,
        styles: ds.styles.clone(),
        source_kind: ds.source_kind,
        skeleton: ds.skeleton.clone(),
        sequences: ds
            .sequences
            .iter()
            .map(|s| SequenceEntry {
                name: s.name.clone(),
                style: s.style,
                frames: s.gestures.nrows(),
            })
            .collect(),
        split: split.clone(),
    };
    let path = dir.join(INDEX_FILE);
    let json = serde_json::to_vec_pretty(&index)?;
    atomic_write(&path, |w| Ok(w.write_all(&json)?))?;
    written.push(path);
    Ok(written)
}

/// Reads a dataset directory; features come back as stored (`f32` precision).
pub fn read_dataset(dir: &Path) -> Result<(Dataset, Split)> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path)
        .with_context(|| format!("reading {} (run `gdk prepare-data` first)", path.display()))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(gdk_core::Error::from)?;
    if index.version != INDEX_VERSION {
        return Err(gdk_core::Error::Format(format!(
            "dataset index version {} is not supported (expected {INDEX_VERSION})",
            index.version
        ))
        .into());
    }
    let joints = index.skeleton.joint_count() as u32;
    let mut sequences = Vec::with_capacity(index.sequences.len());
    for entry in &index.sequences {
        let g = FeatureCache::read(&gesture_path(dir, &entry.name))?;
        let a = FeatureCache::read(&audio_path(dir, &entry.name))?;
        if g.joints != joints {
            bail!(gdk_core::Error::Structural(format!(
                "{}: cache has {} joints, index skeleton {joints}",
                entry.name, g.joints
            )));
        }
        if g.data.nrows() != entry.frames || a.data.nrows() != entry.frames {
            bail!(gdk_core::Error::Structural(format!("{}: frame counts disagree", entry.name)));
        }
        sequences.push(Sequence {
            name: entry.name.clone(),
            style: entry.style,
            gestures: g.to_f64(),
            audio: a.to_f64(),
            waveform: None,
        });
    }
    Ok((
        Dataset {
            styles: index.styles,
            skeleton: index.skeleton,
            source_kind: index.source_kind,
            sequences,
        },
        index.split,
    ))
}
