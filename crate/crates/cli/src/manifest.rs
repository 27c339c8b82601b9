use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run.json";

/// Record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
    #[serde(skip)]
    dir: PathBuf,
}

pub fn config_hash(config: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, dir: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash(config),
            inputs,
            outputs,
            version: format!("v{}", env!("CARGO_PKG_VERSION")),
            duration_secs: 0.0,
            dir: dir.to_path_buf(),
        }
    }

    pub fn finish(mut self, elapsed: Duration) -> Result<()> {
        self.duration_secs = elapsed.as_secs_f64();
        let path = self.dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
