mod dump;
mod evaluate;
mod manifest;
mod prepare;
mod sample;
mod store;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Speech-driven stylized gesture generation.
#[derive(Debug, Parser)]
#[command(name = "gdk", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a dataset directory of feature caches (toy or ingested).
    PrepareData(prepare::Args),
    /// Train a denoiser from a TOML config.
    Train(train::Args),
    /// Generate gestures for a speech recording.
    Sample(sample::SampleArgs),
    /// Generate gestures mixing two styles.
    StyleEdit(sample::StyleEditArgs),
    /// Write masks, schedules, statistics or embeddings to CSV/JSON.
    Dump(dump::Args),
    /// Deterministic validation loss of a checkpoint.
    Evaluate(evaluate::Args),
}

/// Wrong or conflicting command-line input (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Dataset directory: the flag if given, else `$GDK_CACHE_DIR`, else `./gdk-cache`.
pub fn cache_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("GDK_CACHE_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("gdk-cache"))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<gdk_core::Error>() {
        Some(gdk_core::Error::Numeric(_)) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let argv: Vec<String> = std::env::args().collect();
    let result = match cli.command {
        Command::PrepareData(a) => prepare::run(a, &argv),
        Command::Train(a) => train::run(a, &argv),
        Command::Sample(a) => sample::run_sample(a, &argv),
        Command::StyleEdit(a) => sample::run_style_edit(a, &argv),
        Command::Dump(a) => dump::run(a, &argv),
        Command::Evaluate(a) => evaluate::run(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
