//! Diagnostic dumps.
//!
//! | kind         | format | columns                                              |
//! |--------------|--------|------------------------------------------------------|
//! | `mask`       | CSV    | no header; row i, column j = 1 if query i sees key j |
//! | `schedule`   | CSV    | `t,beta,alpha,alpha_bar,posterior_variance`          |
//! | `stats`      | CSV    | `index,column,mean,std`                              |
//! | `embeddings` | JSON   | `{styles: [{label, vector}], timesteps: [{t, vector}]}` |

use std::io::Write;
use std::path::PathBuf;

use anyhow::Result;
use gdk_core::container::{atomic_write, Checkpoint};
use gdk_core::diffusion::NoiseSchedule;
use gdk_core::masks::{build_mask, MaskKind};
use gdk_core::motion::{compute_stats, FeatureLayout, FeatureStats, Skeleton};
use gdk_core::DType;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{cache_dir, store, usage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Kind {
    Mask,
    Schedule,
    Stats,
    Embeddings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Pattern {
    Full,
    SlidingWindow,
    CrossLocal,
    ForwardLocal,
}

impl From<Pattern> for MaskKind {
    fn from(p: Pattern) -> Self {
        match p {
            Pattern::Full => MaskKind::Full,
            Pattern::SlidingWindow => MaskKind::SlidingWindow,
            Pattern::CrossLocal => MaskKind::CrossLocal,
            Pattern::ForwardLocal => MaskKind::ForwardLocal,
        }
    }
}

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    #[arg(value_enum)]
    kind: Kind,
    #[arg(long, value_enum, default_value = "cross_local")]
    pattern: Pattern,
    /// Sequence length for `mask`.
    #[arg(long, default_value_t = 80)]
    size: usize,
    #[arg(long, default_value_t = 11)]
    window: usize,
    /// Noising steps for `schedule`.
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 0.008)]
    offset: f64,
    /// Source of `stats` / `embeddings` (and of `schedule` when given).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory for `stats` without a checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Steps whose embeddings are dumped (default: 1, T/10, T/2, T).
    #[arg(long, value_delimiter = ',')]
    timesteps: Option<Vec<usize>>,
    #[arg(long)]
    out: PathBuf,
}

fn csv_bytes(rows: impl IntoIterator<Item = Vec<String>>, header: Option<&[&str]>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?)
}

/// Human-readable name of one feature column.
pub fn column_name(layout: &FeatureLayout, skeleton: Option<&Skeleton>, index: usize) -> String {
    let joint = |j: usize| skeleton.map_or(format!("joint{j}"), |s| s.names[j].clone());
    let blocks: [(&str, std::ops::Range<usize>); 5] = [
        ("root_pos", layout.root_pos()),
        ("root_rot", layout.root_rot()),
        ("root_vel", layout.root_vel()),
        ("root_ang_vel", layout.root_ang_vel()),
        ("gaze", layout.gaze()),
    ];
    for (name, r) in blocks {
        if r.contains(&index) {
            return format!("{name}[{}]", index - r.start);
        }
    }
    let per_joint: [(&str, std::ops::Range<usize>, usize); 4] = [
        ("pos", layout.joint_pos_block(), 3),
        ("rot6d", layout.joint_rot_block(), 6),
        ("vel", layout.joint_vel_block(), 3),
        ("ang_vel", layout.joint_ang_vel_block(), 3),
    ];
    for (name, r, width) in per_joint {
        if r.contains(&index) {
            let off = index - r.start;
            return format!("{}.{name}[{}]", joint(off / width), off % width);
        }
    }
    format!("col{index}")
}

pub fn run(args: Args, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("dump", argv);
    manifest.config(&args)?;
    let checkpoint = match &args.checkpoint {
        Some(p) => {
            manifest.checkpoint(p)?;
            Some(Checkpoint::load(p)?)
        }
        None => None,
    };
    let bytes = match args.kind {
        Kind::Mask => {
            let m = build_mask(args.pattern.into(), args.size, args.window)?;
            csv_bytes(m.grid().into_iter().map(|r| r.iter().map(u8::to_string).collect()), None)?
        }
        Kind::Schedule => {
            let sched = match &checkpoint {
                Some(c) => c.schedule()?,
                None => NoiseSchedule::cosine(args.steps, args.offset)?,
            };
            let rows = (1..=sched.steps()).map(|t| {
                vec![
                    t.to_string(),
                    sched.beta(t).to_string(),
                    sched.alpha(t).to_string(),
                    sched.alpha_bar(t).to_string(),
                    sched.posterior_variance(t).to_string(),
                ]
            });
            csv_bytes(rows, Some(&["t", "beta", "alpha", "alpha_bar", "posterior_variance"]))?
        }
        Kind::Stats => {
            let (stats, skeleton): (FeatureStats, Skeleton) = match &checkpoint {
                Some(c) => (c.header.stats.clone(), c.header.skeleton.clone()),
                None => {
                    let dir = cache_dir(args.data.clone());
                    manifest.input(&dir.join(store::INDEX_FILE))?;
                    let (ds, split) = store::read_dataset(&dir)?;
                    let stats = compute_stats(split.train.iter().map(|&i| ds.sequences[i].gestures.view()))?;
                    (stats, ds.skeleton)
                }
            };
            let layout = FeatureLayout::new(skeleton.joint_count());
            let rows = (0..stats.dim()).map(|i| {
                vec![
                    i.to_string(),
                    column_name(&layout, Some(&skeleton), i),
                    stats.mean[i].to_string(),
                    stats.std[i].to_string(),
                ]
            });
            csv_bytes(rows, Some(&["index", "column", "mean", "std"]))?
        }
        Kind::Embeddings => {
            let c = checkpoint.ok_or_else(|| usage("`dump embeddings` needs --checkpoint"))?;
            let model = c.build_model(DType::F32)?;
            let styles = model.style_embeddings()?;
            let steps = model.config().diffusion_steps;
            let mut picked = args.timesteps.clone().unwrap_or_else(|| vec![1, steps / 10, steps / 2, steps]);
            picked.retain(|t| *t >= 1);
            picked.dedup();
            let ts = model.embed_timestep(&picked)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            let json = serde_json::json!({
                "styles": c.header.styles.iter().zip(styles.rows()).map(|(label, v)| {
                    serde_json::json!({"label": label, "vector": v.to_vec()})
                }).collect::<Vec<_>>(),
                "timesteps": picked.iter().zip(ts).map(|(t, v)| {
                    serde_json::json!({"t": t, "vector": v})
                }).collect::<Vec<_>>(),
            });
            serde_json::to_vec_pretty(&json)?
        }
    };
    atomic_write(&args.out, |w| Ok(w.write_all(&bytes)?))?;
    manifest.output(&args.out)?;
    manifest.finish(&args.out)?;
    Ok(())
}
