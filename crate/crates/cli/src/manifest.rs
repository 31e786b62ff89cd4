use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
}

/// Written as `<command>.manifest.json` next to a command's outputs, also
/// when the command fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub toolkit_version: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<OutputFile>,
    pub exit_code: i32,
    pub error: Option<String>,
    /// The only field expected to differ between identical runs.
    pub wall_time_secs: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.manifest.json"))
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64, inputs: Vec<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash,
            seed,
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs: Vec::new(),
            exit_code: 0,
            error: None,
            wall_time_secs: 0.0,
        }
    }

    /// Hashes each output as it exists on disk now.
    pub fn record_outputs(&mut self, out: &Path, files: &[PathBuf]) -> io::Result<()> {
        for f in files {
            let rel = f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/");
            self.outputs.push(OutputFile { path: rel, sha256: sha256_hex(&fs::read(f)?) });
        }
        Ok(())
    }

    pub fn write(&self, out: &Path) -> io::Result<()> {
        fs::create_dir_all(out)?;
        let json = serde_json::to_string_pretty(self).map_err(io::Error::from)?;
        fs::write(manifest_path(out, &self.command), json + "\n")
    }
}
