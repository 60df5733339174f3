//! Datasets: the synthetic toy generator, BVH/WAV ingestion, sequence-level
//! splits and assembly of normalized training clips.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::audio::{self, align_to_gesture, Mfcc, MfccConfig, SourceKind, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::motion::rotation::{rot_x, rot_y, rot_z};
use crate::motion::{
    compute_stats, extract_features, mirror_augment, normalize, resample_sequence, Bvh,
    FeatureLayout, FeatureStats, MotionSequence, Skeleton, CLIP_FRAMES, DEFAULT_CROP_STRIDE, FPS,
    LENGTH_RATIOS, SEED_FRAMES,
};

pub const DEFAULT_STYLES: [&str; 6] = ["happy", "sad", "neutral", "old", "relaxed", "angry"];

/// Hand joints of [`Skeleton::toy`].
pub const TOY_HANDS: [usize; 2] = [4, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub style: usize,
    /// Raw gesture features, `frames x (16 + 15j)`.
    pub gestures: Array2<f64>,
    /// Raw audio features aligned to the gesture frames.
    pub audio: Array2<f64>,
    pub waveform: Option<Waveform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub styles: Vec<String>,
    pub skeleton: Skeleton,
    pub source_kind: SourceKind,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn layout(&self) -> FeatureLayout {
        FeatureLayout::new(self.skeleton.joint_count())
    }

    pub fn style_index(&self, label: &str) -> Result<usize> {
        style_index(&self.styles, label)
    }
}

pub fn style_index(styles: &[String], label: &str) -> Result<usize> {
    styles
        .iter()
        .position(|s| s == label)
        .ok_or_else(|| Error::validation(format!("unknown style `{label}` (known: {})", styles.join(", "))))
}

/// Per-style motion character of the toy data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyStyle {
    /// Arm elevation in radians; 0 is horizontal, negative is down.
    pub elevation: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub lean: f64,
}

/// Style parameters by label; unknown labels get evenly spread elevations.
pub fn toy_style(label: &str, index: usize, count: usize) -> ToyStyle {
    let (elevation, amplitude, frequency, lean) = match label {
        "happy" => (-0.2, 0.35, 2.0, -0.05),
        "angry" => (-0.5, 0.45, 2.6, 0.1),
        "neutral" => (-0.8, 0.2, 1.2, 0.0),
        "relaxed" => (-1.0, 0.12, 0.8, -0.1),
        "sad" => (-1.2, 0.08, 0.6, 0.25),
        "old" => (-1.4, 0.1, 0.5, 0.3),
        _ => {
            let f = index as f64 / count.max(2).saturating_sub(1) as f64;
            (-0.2 - 1.2 * f, 0.3 - 0.2 * f, 2.0 - 1.4 * f, 0.3 * f)
        }
    };
    ToyStyle {
        elevation,
        amplitude,
        frequency,
        lean,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub styles: Vec<String>,
    pub sequences_per_style: usize,
    pub seconds: f64,
    pub keep_waveforms: bool,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            styles: DEFAULT_STYLES.iter().map(|s| s.to_string()).collect(),
            sequences_per_style: 10,
            seconds: 12.0,
            keep_waveforms: false,
        }
    }
}

/// Speech-like loudness envelope in `[0, 1]`.
fn envelope(time: f64, phase: (f64, f64)) -> f64 {
    (0.5 + 0.5 * (TAU * 0.3 * time + phase.0).sin()) * (0.6 + 0.4 * (TAU * 1.1 * time + phase.1).sin())
}

/// Procedural motion on the toy skeleton plus band-limited noise speech
/// whose loudness drives the motion energy. Deterministic in `rng`.
pub fn generate_toy_dataset(config: &ToyConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    if config.styles.is_empty() || config.sequences_per_style == 0 {
        return Err(Error::validation("toy dataset needs styles and sequences"));
    }
    let frames = (config.seconds * FPS).round() as usize;
    if frames < 2 {
        return Err(Error::validation("toy sequences must be at least two frames"));
    }
    let skeleton = Skeleton::toy();
    let mfcc = Mfcc::new(MfccConfig::default())?;
    let mut sequences = Vec::new();
    for (si, label) in config.styles.iter().enumerate() {
        let style = toy_style(label, si, config.styles.len());
        for k in 0..config.sequences_per_style {
            let mut seq_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let seq = toy_sequence(&skeleton, &style, frames, &mfcc, &mut seq_rng, config.keep_waveforms)?;
            sequences.push(Sequence {
                name: format!("{label}_{k:03}"),
                style: si,
                gestures: seq.0,
                audio: seq.1,
                waveform: seq.2,
            });
        }
    }
    Ok(Dataset {
        styles: config.styles.clone(),
        skeleton,
        source_kind: SourceKind::Mfcc13,
        sequences,
    })
}

type ToySequence = (Array2<f64>, Array2<f64>, Option<Waveform>);

fn toy_sequence(
    skeleton: &Skeleton,
    style: &ToyStyle,
    frames: usize,
    mfcc: &Mfcc,
    rng: &mut ChaCha8Rng,
    keep_waveform: bool,
) -> Result<ToySequence> {
    let mut phase = || rng.random_range(0.0..TAU);
    let env_phase = (phase(), phase());
    let (pl, pr, ph, pr0, pr1) = (phase(), phase(), phase(), phase(), phase());
    let elevation = style.elevation + 0.03 * rng.sample::<f64, _>(StandardNormal);
    let amp = style.amplitude * (1.0 + 0.1 * rng.sample::<f64, _>(StandardNormal));
    let freq = style.frequency * (1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal));

    let mut root_positions = Vec::with_capacity(frames);
    let mut rotations = Vec::with_capacity(frames);
    for f in 0..frames {
        let time = f as f64 / FPS;
        let e = envelope(time, env_phase);
        let swing = |p: f64| amp * e * (TAU * freq * time + p).sin();
        root_positions.push(Vector3::new(0.02 * (TAU * 0.2 * time + pr0).sin(), 1.0, 0.0));
        rotations.push(vec![
            rot_y(0.1 * (TAU * 0.1 * time + pr1).sin()),
            rot_x(style.lean + 0.05 * swing(ph)),
            rot_x(0.15 * e * (TAU * 1.7 * time + ph).sin()),
            rot_z(elevation + swing(pl)),
            rot_z(0.5 * swing(pl + 0.8)),
            rot_z(-(elevation + swing(pr))),
            rot_z(-0.5 * swing(pr + 0.8)),
        ]);
    }
    let motion = MotionSequence {
        root_positions,
        rotations,
        translations: None,
    };
    let gestures = extract_features(&motion, skeleton, None)?;

    let hop = (SAMPLE_RATE as f64 / FPS) as usize;
    let samples = frames * hop;
    let (mut fast, mut slow) = (0.0f64, 0.0f64);
    let wave: Vec<f32> = (0..samples)
        .map(|n| {
            let white: f64 = rng.sample(StandardNormal);
            fast += 0.5 * (white - fast);
            slow += 0.05 * (white - slow);
            let e = envelope(n as f64 / SAMPLE_RATE as f64, env_phase);
            (0.3 * (0.02 + e) * (fast - slow)) as f32
        })
        .collect();
    let raw = mfcc.compute(&wave)?;
    let audio = align_to_gesture(raw.view(), frames)?;
    let waveform = keep_waveform.then(|| Waveform {
        samples: wave,
        rate: SAMPLE_RATE,
    });
    Ok((gestures, audio, waveform))
}

/// Loads `<stem>.bvh` / `<stem>.wav` pairs from `dir`; the style is the
/// part of the stem before the first `_`.
pub fn ingest_directory(dir: &Path, styles: &[String]) -> Result<Dataset> {
    let mut stems: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "bvh"))
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::validation(format!("no .bvh files in {}", dir.display())));
    }
    let mut skeleton: Option<Skeleton> = None;
    let mut sequences = Vec::new();
    let mut kind = SourceKind::Mfcc13;
    for path in stems {
        let name = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let label = name.split('_').next().unwrap_or_default();
        let style = style_index(styles, label)?;
        let bvh = Bvh::parse(&std::fs::read_to_string(&path)?)?;
        match &skeleton {
            Some(s) if s.names != bvh.skeleton.names => {
                return Err(Error::structural(format!("{name}: skeleton differs from the first file")))
            }
            Some(_) => {}
            None => skeleton = Some(bvh.skeleton.clone()),
        }
        let layout = FeatureLayout::new(bvh.skeleton.joint_count());
        let native = extract_features(&bvh.to_motion()?, &bvh.skeleton, None)?;
        let gestures = resample_sequence(native.view(), &layout, bvh.frame_time * FPS)?;
        let wave = audio::read_wav(&path.with_extension("wav"))?;
        let prepared = audio::prepare_audio_features(&wave, gestures.nrows(), None)?;
        kind = prepared.source_kind;
        sequences.push(Sequence {
            name,
            style,
            gestures,
            audio: prepared.frames,
            waveform: None,
        });
    }
    Ok(Dataset {
        styles: styles.to_vec(),
        skeleton: skeleton.expect("at least one file"),
        source_kind: kind,
        sequences,
    })
}

/// Sequence indices of each partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles whole sequences into train/val/test with the given ratios.
pub fn split_dataset(count: usize, ratios: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Split> {
    if count < 10 {
        return Err(Error::validation(format!("need at least 10 sequences to split, got {count}")));
    }
    let total: usize = ratios.iter().sum();
    if total == 0 || ratios[0] == 0 {
        return Err(Error::validation("split ratios need a positive training share"));
    }
    let share = |r: usize| ((count * r) as f64 / total as f64).round() as usize;
    let (val, test) = (share(ratios[1]), share(ratios[2]));
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(rng);
    let test_part = idx.split_off(count - test);
    let val_part = idx.split_off(count - test - val);
    Ok(Split {
        train: idx,
        val: val_part,
        test: test_part,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingClip {
    pub seed: Array2<f64>,
    pub target: Array2<f64>,
    /// Audio features for the target frames.
    pub audio: Array2<f64>,
    pub style: usize,
    pub sequence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipOptions {
    pub seed_frames: usize,
    pub clip_frames: usize,
    pub stride: usize,
    pub mirror: bool,
    pub length_ratios: Vec<f64>,
}

impl Default for ClipOptions {
    fn default() -> Self {
        Self {
            seed_frames: SEED_FRAMES,
            clip_frames: CLIP_FRAMES,
            stride: DEFAULT_CROP_STRIDE,
            mirror: true,
            length_ratios: LENGTH_RATIOS.to_vec(),
        }
    }
}

impl ClipOptions {
    pub fn without_augmentation(&self) -> Self {
        Self {
            mirror: false,
            length_ratios: vec![1.0],
            ..self.clone()
        }
    }
}

/// Augmented full-length variants of one sequence: `(gestures, audio)`.
fn variants(seq: &Sequence, skeleton: &Skeleton, opts: &ClipOptions) -> Result<Vec<(Array2<f64>, Array2<f64>)>> {
    let layout = FeatureLayout::new(skeleton.joint_count());
    let mut out = Vec::new();
    for &ratio in &opts.length_ratios {
        let g = resample_sequence(seq.gestures.view(), &layout, ratio)?;
        let a = if g.nrows() == seq.audio.nrows() {
            seq.audio.clone()
        } else {
            align_to_gesture(seq.audio.view(), g.nrows())?
        };
        if opts.mirror {
            out.push((mirror_augment(g.view(), skeleton)?, a.clone()));
        }
        out.push((g, a));
    }
    Ok(out)
}

/// Windows of `seed + clip` frames from the listed sequences, raw features.
pub fn assemble_clips(dataset: &Dataset, indices: &[usize], opts: &ClipOptions) -> Result<Vec<TrainingClip>> {
    let window = opts.seed_frames + opts.clip_frames;
    let mut clips = Vec::new();
    for &i in indices {
        let seq = &dataset.sequences[i];
        for (g, a) in variants(seq, &dataset.skeleton, opts)? {
            if g.nrows() < window {
                log::warn!("{} is shorter than one window; skipped", seq.name);
                continue;
            }
            for start in crate::motion::augment::crop_starts(g.nrows(), window, opts.stride) {
                let mid = start + opts.seed_frames;
                clips.push(TrainingClip {
                    seed: g.slice(s![start..mid, ..]).to_owned(),
                    target: g.slice(s![mid..start + window, ..]).to_owned(),
                    audio: a.slice(s![mid..start + window, ..]).to_owned(),
                    style: seq.style,
                    sequence: i,
                });
            }
        }
    }
    Ok(clips)
}

/// Normalized training and validation clips with the statistics used.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Vec<TrainingClip>,
    pub val: Vec<TrainingClip>,
    pub stats: FeatureStats,
    pub audio_stats: FeatureStats,
}

/// Builds clips for the split, computing gesture and audio statistics on the
/// augmented training sequences only.
pub fn prepare_training_data(dataset: &Dataset, split: &Split, opts: &ClipOptions) -> Result<PreparedData> {
    let mut gestures = Vec::new();
    let mut audio = Vec::new();
    for &i in &split.train {
        for (g, a) in variants(&dataset.sequences[i], &dataset.skeleton, opts)? {
            gestures.push(g);
            audio.push(a);
        }
    }
    let stats = compute_stats(gestures.iter().map(|g| g.view()))?;
    let audio_stats = compute_stats(audio.iter().map(|a| a.view()))?;
    let train = normalize_clips(assemble_clips(dataset, &split.train, opts)?, &stats, &audio_stats)?;
    let val = normalize_clips(
        assemble_clips(dataset, &split.val, &opts.without_augmentation())?,
        &stats,
        &audio_stats,
    )?;
    Ok(PreparedData {
        train,
        val,
        stats,
        audio_stats,
    })
}

pub fn normalize_clips(
    clips: Vec<TrainingClip>,
    stats: &FeatureStats,
    audio_stats: &FeatureStats,
) -> Result<Vec<TrainingClip>> {
    clips
        .into_iter()
        .map(|c| {
            Ok(TrainingClip {
                seed: normalize(c.seed.view(), stats)?,
                target: normalize(c.target.view(), stats)?,
                audio: normalize(c.audio.view(), audio_stats)?,
                ..c
            })
        })
        .collect()
}

/// Mean height (root-frame y) of the given joints over all frames of raw features.
pub fn mean_joint_height(frames: ArrayView2<f64>, layout: &FeatureLayout, joints: &[usize]) -> f64 {
    let mut sum = 0.0;
    for row in frames.rows() {
        for &j in joints {
            sum += row[layout.joint_pos(j).start + 1];
        }
    }
    sum / (frames.nrows() * joints.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            sequences_per_style: 2,
            seconds: 6.0,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn toy_dataset_is_deterministic() {
        let a = generate_toy_dataset(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = generate_toy_dataset(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        let c = generate_toy_dataset(&small(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.sequences[0].gestures, c.sequences[0].gestures);
        assert_eq!(a.sequences.len(), 12);
        assert_eq!(a.sequences[0].gestures.dim(), (120, 16 + 15 * 7));
        assert_eq!(a.sequences[0].audio.dim(), (120, 13));
    }

    #[test]
    fn toy_base_poses_are_distinct() {
        let styles: Vec<ToyStyle> = DEFAULT_STYLES
            .iter()
            .enumerate()
            .map(|(i, s)| toy_style(s, i, 6))
            .collect();
        for i in 0..6 {
            for j in i + 1..6 {
                assert!((styles[i].elevation - styles[j].elevation).abs() > 0.0);
            }
        }
    }

    #[test]
    fn styles_are_separable_by_nearest_centroid() {
        let cfg = ToyConfig {
            sequences_per_style: 6,
            seconds: 8.0,
            ..ToyConfig::default()
        };
        let ds = generate_toy_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let layout = ds.layout();
        // descriptor: mean hand height and hand-height spread per clip
        let describe = |c: &TrainingClip| {
            let h = mean_joint_height(c.target.view(), &layout, &TOY_HANDS);
            let y: Vec<f64> = c.target.rows().into_iter().map(|r| r[layout.joint_pos(4).start + 1]).collect();
            let sd = (y.iter().map(|v| (v - h).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
            [h, sd]
        };
        let opts = ClipOptions::default().without_augmentation();
        let fit: Vec<usize> = (0..ds.sequences.len()).filter(|i| i % 6 < 3).collect();
        let held: Vec<usize> = (0..ds.sequences.len()).filter(|i| i % 6 >= 3).collect();
        let fit_clips = assemble_clips(&ds, &fit, &opts).unwrap();
        let mut centroids = vec![[0.0; 2]; 6];
        let mut counts = vec![0.0; 6];
        for c in &fit_clips {
            let d = describe(c);
            centroids[c.style][0] += d[0];
            centroids[c.style][1] += d[1];
            counts[c.style] += 1.0;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c[0] /= n;
            c[1] /= n;
        }
        let held_clips = assemble_clips(&ds, &held, &opts).unwrap();
        let correct = held_clips
            .iter()
            .filter(|c| {
                let d = describe(c);
                let best = (0..6)
                    .min_by(|&a, &b| {
                        let da = (d[0] - centroids[a][0]).powi(2) + (d[1] - centroids[a][1]).powi(2);
                        let db = (d[0] - centroids[b][0]).powi(2) + (d[1] - centroids[b][1]).powi(2);
                        da.total_cmp(&db)
                    })
                    .unwrap();
                best == c.style
            })
            .count();
        let acc = correct as f64 / held_clips.len() as f64;
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn split_is_disjoint_and_proportional() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = split_dataset(10, [8, 1, 1], &mut rng).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split_dataset(60, [8, 1, 1], &mut rng).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (48, 6, 6));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        let a = split_dataset(37, [8, 1, 1], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = split_dataset(37, [8, 1, 1], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(split_dataset(9, [8, 1, 1], &mut rng), Err(Error::Validation(_))));
    }

    #[test]
    fn clips_have_expected_shapes_and_no_leakage() {
        let ds = generate_toy_dataset(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let split = split_dataset(ds.sequences.len(), [8, 1, 1], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let data = prepare_training_data(&ds, &split, &ClipOptions::default()).unwrap();
        assert!(!data.train.is_empty());
        for c in &data.train {
            assert_eq!(c.seed.dim(), (8, 121));
            assert_eq!(c.target.dim(), (80, 121));
            assert_eq!(c.audio.dim(), (80, 13));
            assert!(split.train.contains(&c.sequence));
        }
        for c in &data.val {
            assert!(split.val.contains(&c.sequence));
        }
        // 120 frames: one window per variant, 3 ratios x 2 mirror states, 1.1x gives 132 frames -> 2 windows
        let per_seq = assemble_clips(&ds, &[0], &ClipOptions::default()).unwrap().len();
        assert_eq!(per_seq, 2 * (1 + 1 + 2));
    }

    #[test]
    fn seed_precedes_target() {
        let ds = generate_toy_dataset(&small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let clips = assemble_clips(&ds, &[0], &ClipOptions::default().without_augmentation()).unwrap();
        let g = &ds.sequences[0].gestures;
        assert_eq!(clips[0].seed, g.slice(s![0..8, ..]));
        assert_eq!(clips[0].target, g.slice(s![8..88, ..]));
    }

    #[test]
    fn unknown_style_label() {
        let styles: Vec<String> = DEFAULT_STYLES.iter().map(|s| s.to_string()).collect();
        assert_eq!(style_index(&styles, "old").unwrap(), 3);
        assert!(matches!(style_index(&styles, "bored"), Err(Error::Validation(_))));
    }
}
