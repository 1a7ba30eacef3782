//! Run directories: an exclusive lock while a command writes, and one
//! manifest describing the invocation.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const LOCK_FILE: &str = ".cvla.lock";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Held for the lifetime of a command; a second command on the same output
/// directory fails instead of interleaving writes.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(LOCK_FILE);
        fs::OpenOptions::new().write(true).create_new(true).open(&path).with_context(|| {
            format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display())
        })?;
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub version: String,
    pub output_dir: PathBuf,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
}

pub fn version_string() -> String {
    match option_env!("CVLA_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(command: &str, config_path: Option<&Path>, seed: u64, output_dir: &Path) -> Self {
        Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            version: version_string(),
            output_dir: output_dir.to_path_buf(),
            started_unix: now(),
            finished_unix: None,
        }
    }

    pub fn finish(mut self) -> Result<()> {
        self.finished_unix = Some(now());
        fs::write(self.output_dir.join(RUN_MANIFEST), serde_json::to_vec_pretty(&self)?)?;
        Ok(())
    }
}
