//! Output placement: atomic file writes and the run manifest.
//!
//! Result files are written to a temporary file in the target directory and
//! renamed into place, so a failed run never leaves a partial artifact.
//! Timestamps and wall time live only in the manifest; every other artifact
//! is a pure function of the inputs.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Record of one invocation: what ran, on what inputs, producing which files.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub command: String,
    /// Resolved inputs (config or axes plus command parameters), sufficient
    /// to reproduce the artifacts byte for byte.
    pub inputs: serde_json::Value,
    pub config_hash: String,
    pub artifacts: Vec<String>,
    /// Realizations rejected by numerical guards, when the command runs any.
    pub exclusions: Option<usize>,
    pub wall_time_s: f64,
    pub created_unix_s: u64,
}

pub struct ManifestBuilder {
    command: String,
    inputs: serde_json::Value,
    config_hash: String,
    artifacts: Vec<String>,
    exclusions: Option<usize>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, inputs: serde_json::Value, config_hash: String) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            inputs,
            config_hash,
            artifacts: Vec::new(),
            exclusions: None,
            started: Instant::now(),
        }
    }

    pub fn exclusions(&mut self, n: usize) {
        self.exclusions = Some(n);
    }

    /// Write one artifact atomically and record it.
    pub fn artifact(&mut self, dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
        let path = write_atomic(dir, name, text)?;
        self.artifacts.push(name.to_string());
        Ok(path)
    }

    pub fn finish(self, dir: &Path) -> anyhow::Result<PathBuf> {
        let manifest = RunManifest {
            tool_version: TOOL_VERSION,
            command: self.command,
            inputs: self.inputs,
            config_hash: self.config_hash,
            artifacts: self.artifacts,
            exclusions: self.exclusions,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            created_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let text = kerr_echo::io::pretty_json(&manifest)?;
        write_atomic(dir, "manifest.json", &text)
    }
}

pub fn write_atomic(dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    let path = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    tmp.persist(&path)
        .with_context(|| format!("moving result into place at {}", path.display()))?;
    Ok(path)
}
