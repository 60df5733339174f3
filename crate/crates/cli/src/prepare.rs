use std::path::PathBuf;

use anyhow::Result;
use gdk_core::audio::write_wav;
use gdk_core::data::{generate_toy_dataset, ingest_directory, split_dataset, ToyConfig, DEFAULT_STYLES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::manifest::RunManifest;
use crate::{cache_dir, store, usage};

#[derive(Debug, clap::Args, Serialize)]
pub struct Args {
    /// Generate the synthetic toy dataset.
    #[arg(long, conflicts_with = "input")]
    toy: bool,
    /// Directory of `<style>_<name>.bvh` / `.wav` pairs to ingest.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Comma-separated style labels.
    #[arg(long, value_delimiter = ',')]
    styles: Option<Vec<String>>,
    #[arg(long, default_value_t = 10)]
    sequences_per_style: usize,
    /// Length of each toy sequence in seconds.
    #[arg(long, default_value_t = 12.0)]
    seconds: f64,
    /// Also write the toy waveforms under `<out>/wav/`.
    #[arg(long)]
    wav: bool,
    #[arg(long, default_value_t = 0)]
    rng: u64,
    /// Output directory (default: $GDK_CACHE_DIR or ./gdk-cache).
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: Args, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start("prepare-data", argv);
    manifest.config(&args)?;
    manifest.rng_seeds.push(args.rng);
    let out = cache_dir(args.out.clone());
    let styles: Vec<String> = args
        .styles
        .clone()
        .unwrap_or_else(|| DEFAULT_STYLES.iter().map(|s| s.to_string()).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(args.rng);
    let dataset = match (&args.input, args.toy) {
        (Some(dir), false) => ingest_directory(dir, &styles)?,
        (None, true) => {
            let cfg = ToyConfig {
                styles,
                sequences_per_style: args.sequences_per_style,
                seconds: args.seconds,
                keep_waveforms: args.wav,
            };
            generate_toy_dataset(&cfg, &mut rng)?
        }
        _ => return Err(usage("pass either --toy or --input DIR")),
    };
    let split = split_dataset(dataset.sequences.len(), [8, 1, 1], &mut rng)?;
    let written = store::write_dataset(&out, &dataset, &split)?;
    for path in &written {
        manifest.output(path)?;
    }
    if args.wav {
        let wav_dir = out.join("wav");
        std::fs::create_dir_all(&wav_dir)?;
        for seq in &dataset.sequences {
            if let Some(w) = &seq.waveform {
                let p = wav_dir.join(format!("{}.wav", seq.name));
                write_wav(&p, w)?;
                manifest.output(&p)?;
            }
        }
    }
    log::info!(
        "{} sequences ({} train / {} val / {} test) written to {}",
        dataset.sequences.len(),
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    manifest.finish(&out.join(store::INDEX_FILE))?;
    Ok(())
}
