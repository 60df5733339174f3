use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gdk_core::container::{Checkpoint, CheckpointMeta};
use gdk_core::data::{prepare_training_data, ClipOptions};
use gdk_core::denoiser::{Denoiser, DenoiserConfig};
use gdk_core::masks::MaskKind;
use gdk_core::train::{TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::manifest::RunManifest;
use crate::{cache_dir, store, usage};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Flat TOML file; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (overrides the config's `data`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path (overrides the config's `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Size preset the remaining keys are applied on top of.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

/// Contents of `train.toml`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub preset: Preset,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    // optimisation
    pub lr: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub eps: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub sample_budget: Option<usize>,
    pub diffusion_steps: Option<usize>,
    pub cosine_offset: Option<f64>,
    pub mask_prob: Option<f64>,
    pub rng_seed: Option<u64>,
    // network
    pub heads: Option<usize>,
    pub head_channels: Option<usize>,
    pub model_channels: Option<usize>,
    pub self_attn_layers: Option<usize>,
    pub window: Option<usize>,
    pub rpe_radius: Option<usize>,
    pub dropout: Option<f64>,
    pub ff_mult: Option<usize>,
    pub timestep_dim: Option<usize>,
    pub gesture_emb_dim: Option<usize>,
    pub audio_emb_dim: Option<usize>,
    pub style_emb_dim: Option<usize>,
    pub seed_emb_dim: Option<usize>,
    pub seed_frames: Option<usize>,
    pub clip_frames: Option<usize>,
    pub local_pattern: Option<MaskKind>,
    // clips
    pub stride: Option<usize>,
    pub mirror: Option<bool>,
    pub length_ratios: Option<Vec<f64>>,
}

/// Fully resolved settings, recorded in the run manifest.
#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub train: TrainConfig,
    pub model: DenoiserConfig,
    pub clips: ClipOptions,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),+) => {
        $( if let Some(v) = $src.$field.clone() { $dst.$field = v; } )+
    };
}

impl TrainFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| gdk_core::Error::Config(format!("{}: {e}", path.display())).into())
    }

    pub fn resolve(&self, gesture_dim: usize, audio_dim: usize, style_count: usize) -> Result<Resolved> {
        let (mut train, mut model) = match self.preset {
            Preset::Desk => (TrainConfig::desk(), DenoiserConfig::desk(gesture_dim, audio_dim, style_count)),
            Preset::Full => (TrainConfig::default(), DenoiserConfig::full(gesture_dim, audio_dim, style_count)),
        };
        overlay!(
            train, self, lr, beta1, beta2, eps, weight_decay, batch_size, sample_budget, diffusion_steps,
            cosine_offset, mask_prob, rng_seed
        );
        overlay!(
            model, self, heads, head_channels, model_channels, self_attn_layers, window, rpe_radius, dropout,
            ff_mult, timestep_dim, gesture_emb_dim, audio_emb_dim, style_emb_dim, seed_emb_dim, seed_frames,
            clip_frames, local_pattern
        );
        if self.window.is_some() && self.rpe_radius.is_none() {
            model.rpe_radius = 2 * model.window;
        }
        model.diffusion_steps = train.diffusion_steps;
        let mut clips = ClipOptions {
            seed_frames: model.seed_frames,
            clip_frames: model.clip_frames,
            ..ClipOptions::default()
        };
        overlay!(clips, self, stride, mirror, length_ratios);
        train.validate()?;
        model.validate()?;
        Ok(Resolved { train, model, clips })
    }
}

pub fn run(args: Args, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("train", argv);
    let file = match &args.config {
        Some(p) => {
            manifest.input(p)?;
            TrainFile::load(p)?
        }
        None => TrainFile::default(),
    };
    let data_dir = cache_dir(args.data.clone().or(file.data.clone()));
    let out = args
        .out
        .clone()
        .or(file.out.clone())
        .ok_or_else(|| usage("no checkpoint path: pass --out or set `out` in the config"))?;
    manifest.input(&data_dir.join(store::INDEX_FILE))?;
    let (dataset, split) = store::read_dataset(&data_dir)?;
    let layout = dataset.layout();
    let resolved = file.resolve(layout.dim(), dataset.source_kind.raw_dim(), dataset.styles.len())?;
    manifest.config(&resolved)?;
    manifest.rng_seeds.push(resolved.train.rng_seed);

    let data = prepare_training_data(&dataset, &split, &resolved.clips)?;
    log::info!("{} training clips, {} validation clips", data.train.len(), data.val.len());
    let model = Denoiser::new(resolved.model.clone(), gdk_core::DType::F32, resolved.train.rng_seed)?;
    log::info!("{} trainable parameters", model.params().parameter_count());
    let mut trainer = Trainer::new(model, resolved.train.clone())?;
    let meta = |t: &Trainer| CheckpointMeta {
        schedule: t.schedule().params(),
        source_kind: dataset.source_kind,
        styles: dataset.styles.clone(),
        skeleton: dataset.skeleton.clone(),
        stats: data.stats.clone(),
        audio_stats: data.audio_stats.clone(),
        train: Some(resolved.train.clone()),
        steps: t.steps(),
        samples_seen: t.samples_seen(),
    };
    let report = trainer.run(&data, |_, t| {
        Checkpoint::from_model(t.model(), meta(t))?.save(&out)?;
        Ok(())
    })?;
    if report.epochs.is_empty() || report.diverged.is_some() {
        // keep the last good weights on disk even when no epoch finished
        Checkpoint::from_model(trainer.model(), meta(&trainer))?.save(&out)?;
    }
    let mut log_path = out.as_os_str().to_owned();
    log_path.push(".log.json");
    let log_path = PathBuf::from(log_path);
    std::fs::write(&log_path, serde_json::to_vec_pretty(&report)?)?;
    manifest.output(&out)?;
    manifest.output(&log_path)?;
    manifest.finish(&out)?;
    if let Some(msg) = report.diverged {
        return Err(gdk_core::Error::Numeric(format!(
            "training diverged ({msg}); last good weights saved to {}",
            out.display()
        ))
        .into());
    }
    log::info!("checkpoint written to {}", out.display());
    Ok(())
}
