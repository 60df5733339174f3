use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use gdk_core::container::{atomic_write, Checkpoint};
use gdk_core::data::{assemble_clips, normalize_clips, ClipOptions};
use gdk_core::train::evaluation_loss;
use gdk_core::DType;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{cache_dir, store};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitArg,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    rng: u64,
    /// JSON report path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Serialize)]
struct Report {
    split: SplitArg,
    sequences: usize,
    clips: usize,
    loss: f64,
    steps: usize,
    samples_seen: usize,
}

pub fn run(args: Args, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("evaluate", argv);
    manifest.config(&args)?;
    manifest.rng_seeds.push(args.rng);
    manifest.checkpoint(&args.checkpoint)?;
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let dir = cache_dir(args.data.clone());
    manifest.input(&dir.join(store::INDEX_FILE))?;
    let (ds, split) = store::read_dataset(&dir)?;
    if ds.styles != ckpt.header.styles || ds.skeleton.joint_count() != ckpt.header.skeleton.joint_count() {
        return Err(gdk_core::Error::Validation("dataset does not match the checkpoint's styles or skeleton".into()).into());
    }
    let indices = match args.split {
        SplitArg::Train => &split.train,
        SplitArg::Val => &split.val,
        SplitArg::Test => &split.test,
    };
    let cfg = &ckpt.header.model;
    let opts = ClipOptions {
        seed_frames: cfg.seed_frames,
        clip_frames: cfg.clip_frames,
        ..ClipOptions::default()
    }
    .without_augmentation();
    let clips = normalize_clips(
        assemble_clips(&ds, indices, &opts)?,
        &ckpt.header.stats,
        &ckpt.header.audio_stats,
    )?;
    let model = ckpt.build_model(DType::F32)?;
    let loss = evaluation_loss(&model, &ckpt.schedule()?, &clips, args.batch_size, args.rng)?;
    let report = Report {
        split: args.split,
        sequences: indices.len(),
        clips: clips.len(),
        loss,
        steps: ckpt.header.steps,
        samples_seen: ckpt.header.samples_seen,
    };
    log::info!("{:?} loss over {} clips: {loss:.6}", args.split, clips.len());
    let json = serde_json::to_vec_pretty(&report)?;
    atomic_write(&args.out, |w| Ok(w.write_all(&json)?))?;
    manifest.output(&args.out)?;
    manifest.finish(&args.out)?;
    Ok(())
}
