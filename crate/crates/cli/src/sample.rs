use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gdk_core::audio::{prepare_audio_features, read_wav, SAMPLE_RATE};
use gdk_core::container::{atomic_write, Checkpoint, FeatureCache};
use gdk_core::data::style_index;
use gdk_core::guidance::{Counterpart, LongFormRequest, Sampler, SeedPolicy};
use gdk_core::motion::augment::crop_starts;
use gdk_core::motion::{export_bvh, extract_features, normalize, resample_sequence, Bvh, FeatureLayout, FPS};
use gdk_core::DType;
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{cache_dir, store, usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SeedPolicyArg {
    DatasetRandom,
    #[value(alias = "average_gesture")]
    Average,
    Explicit,
}

#[derive(Debug, clap::Args, Serialize)]
pub struct Common {
    /// Trained checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Speech recording (WAV, any rate, mono or stereo).
    #[arg(long)]
    audio: PathBuf,
    #[arg(long, value_enum, default_value = "average")]
    seed_policy: SeedPolicyArg,
    /// BVH whose first frames seed the first clip (`--seed-policy explicit`).
    #[arg(long)]
    seed_bvh: Option<PathBuf>,
    /// Dataset directory for `--seed-policy dataset_random`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    rng: u64,
    /// Frames of linear blend after each clip boundary (0 = off).
    #[arg(long, default_value_t = 0)]
    blend: usize,
    /// Output BVH file.
    #[arg(long)]
    out: PathBuf,
    /// Also write the generated features as a GDK1 cache.
    #[arg(long)]
    features_out: Option<PathBuf>,
}

#[derive(Debug, clap::Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    style: String,
    /// Second style; without it the counterpart is the unconditional model.
    #[arg(long)]
    style2: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

#[derive(Debug, clap::Args, Serialize)]
pub struct StyleEditArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    style_a: String,
    #[arg(long)]
    style_b: String,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
}

pub fn run_sample(args: SampleArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("sample", argv);
    manifest.config(&args)?;
    generate(&args.common, &args.style, args.style2.as_deref(), args.gamma, manifest)
}

pub fn run_style_edit(args: StyleEditArgs, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("style-edit", argv);
    manifest.config(&args)?;
    generate(&args.common, &args.style_a, Some(&args.style_b), args.gamma, manifest)
}

/// First `rows` frames of a BVH as raw features on the 20 fps timeline.
fn seed_from_bvh(path: &Path, joints: usize, rows: usize) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let bvh = Bvh::parse(&text)?;
    if bvh.skeleton.joint_count() != joints {
        return Err(gdk_core::Error::Validation(format!(
            "seed BVH has {} joints, model skeleton {joints}",
            bvh.skeleton.joint_count()
        ))
        .into());
    }
    let layout = FeatureLayout::new(joints);
    let native = extract_features(&bvh.to_motion()?, &bvh.skeleton, None)?;
    let frames = resample_sequence(native.view(), &layout, bvh.frame_time * FPS)?;
    if frames.nrows() < rows {
        return Err(gdk_core::Error::Validation(format!("seed BVH is shorter than {rows} frames")).into());
    }
    Ok(frames.slice(s![..rows, ..]).to_owned())
}

fn generate(
    args: &Common,
    style: &str,
    style2: Option<&str>,
    gamma: f64,
    mut manifest: RunManifest,
) -> Result<()> {
    manifest.rng_seeds.push(args.rng);
    manifest.checkpoint(&args.checkpoint)?;
    manifest.input(&args.audio)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let h = &ckpt.header;
    let model = ckpt.build_model(DType::F32)?;
    let schedule = ckpt.schedule()?;
    let sampler = Sampler::new(&model, &schedule, &h.stats)?;
    let cfg = model.config();
    let joints = h.skeleton.joint_count();

    let style = style_index(&h.styles, style)?;
    let counterpart = match style2 {
        Some(s) => Counterpart::Style(style_index(&h.styles, s)?),
        None => Counterpart::Unconditional,
    };
    let seed_policy = match args.seed_policy {
        SeedPolicyArg::Average => SeedPolicy::Average,
        SeedPolicyArg::Explicit => {
            let path = args
                .seed_bvh
                .as_ref()
                .ok_or_else(|| usage("--seed-policy explicit needs --seed-bvh"))?;
            manifest.input(path)?;
            SeedPolicy::Explicit(seed_from_bvh(path, joints, cfg.seed_frames)?)
        }
        SeedPolicyArg::DatasetRandom => {
            let dir = cache_dir(args.data.clone());
            manifest.input(&dir.join(store::INDEX_FILE))?;
            let (ds, split) = store::read_dataset(&dir)?;
            if ds.skeleton.joint_count() != joints {
                return Err(gdk_core::Error::Validation("dataset skeleton differs from the model's".into()).into());
            }
            let pool = split
                .train
                .iter()
                .flat_map(|&i| {
                    let g = &ds.sequences[i].gestures;
                    crop_starts(g.nrows(), cfg.seed_frames, cfg.clip_frames)
                        .map(|st| g.slice(s![st..st + cfg.seed_frames, ..]).to_owned())
                        .collect::<Vec<_>>()
                })
                .collect();
            SeedPolicy::DatasetRandom(pool)
        }
    };

    let wave = read_wav(&args.audio)?;
    let samples_16k = (wave.samples.len() as f64 * SAMPLE_RATE as f64 / wave.rate as f64).round() as usize;
    let hop = (SAMPLE_RATE as f64 / FPS) as usize;
    let frames = samples_16k.div_ceil(hop);
    if frames == 0 {
        return Err(gdk_core::Error::Validation("audio file is empty".into()).into());
    }
    let audio = prepare_audio_features(&wave, frames, None)?;
    if audio.source_kind != h.source_kind {
        return Err(gdk_core::Error::Validation(format!(
            "model was trained on {:?} features, audio produced {:?}",
            h.source_kind, audio.source_kind
        ))
        .into());
    }
    let audio = normalize(audio.frames.view(), &h.audio_stats)?;
    log::info!(
        "{:.2} s of audio -> {frames} frames in {} clips",
        wave.duration(),
        frames.div_ceil(cfg.clip_frames)
    );

    let mut rng = ChaCha8Rng::seed_from_u64(args.rng);
    let request = LongFormRequest {
        audio,
        style,
        counterpart,
        gamma,
        seed_policy,
        blend_frames: args.blend,
    };
    let output = sampler.sample_long(&request, &mut rng)?;
    let bvh = export_bvh(output.frames.view(), &h.skeleton, FPS)?.write();
    atomic_write(&args.out, |w| Ok(w.write_all(bvh.as_bytes())?))?;
    manifest.output(&args.out)?;
    if let Some(p) = &args.features_out {
        FeatureCache::from_f64(joints, cfg.clip_frames, &output.frames, Some(h.stats.clone())).write(p)?;
        manifest.output(p)?;
    }
    log::info!("wrote {}", args.out.display());
    manifest.finish(&args.out)?;
    Ok(())
}
