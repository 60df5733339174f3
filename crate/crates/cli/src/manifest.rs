use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, Utc};
use gdk_core::container::atomic_write;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one CLI invocation, written next to its main output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub rng_seeds: Vec<u64>,
    pub checkpoint: Option<FileHash>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub started: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn hash(path: &Path) -> Result<FileHash> {
    Ok(FileHash {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

impl RunManifest {
    pub fn start(command: &str, argv: &[String]) -> Self {
        Self {
            tool: format!("gdk {}", env!("CARGO_PKG_VERSION")),
            command: command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::Value::Null,
            rng_seeds: Vec::new(),
            checkpoint: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Utc::now(),
            finished: None,
        }
    }

    pub fn config(&mut self, value: &impl Serialize) -> Result<()> {
        self.config = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(hash(path)?);
        Ok(())
    }

    pub fn checkpoint(&mut self, path: &Path) -> Result<()> {
        self.checkpoint = Some(hash(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(hash(path)?);
        Ok(())
    }

    /// Writes `<primary>.manifest.json`.
    pub fn finish(mut self, primary: &Path) -> Result<PathBuf> {
        self.finished = Some(Utc::now());
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let json = serde_json::to_vec_pretty(&self)?;
        atomic_write(&path, |w| Ok(w.write_all(&json)?))?;
        log::info!("run manifest written to {}", path.display());
        Ok(path)
    }
}
