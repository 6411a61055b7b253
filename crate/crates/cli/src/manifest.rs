//! Run manifests: what a command was asked to do and what it wrote.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub xview_cli: String,
    pub xview_core: String,
    pub run_record_format: u32,
    pub dataset_format: u32,
}

impl Versions {
    pub fn current() -> Self {
        Self {
            xview_cli: env!("CARGO_PKG_VERSION").to_string(),
            xview_core: xview_core::VERSION.to_string(),
            run_record_format: xview_core::detector::RUN_RECORD_VERSION,
            dataset_format: xview_core::synth::DATASET_FORMAT_VERSION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Full argument vector, program name excluded.
    pub args: Vec<String>,
    /// Resolved configuration after flag overrides.
    pub config: serde_json::Value,
    pub master_seed: Option<u64>,
    pub versions: Versions,
    /// Paths written by the command, relative to the output directory.
    pub artifacts: Vec<String>,
    pub duration_secs: f64,
}

/// Collects artifacts during a command and writes the manifest last.
pub struct ManifestBuilder {
    command: String,
    args: Vec<String>,
    started: Instant,
    out: PathBuf,
    artifacts: Vec<String>,
}

impl ManifestBuilder {
    pub fn new(command: &str, args: Vec<String>, out: &Path) -> Self {
        Self {
            command: command.to_string(),
            args,
            started: Instant::now(),
            out: out.to_path_buf(),
            artifacts: Vec::new(),
        }
    }

    /// Writes `contents` to `out/name` and records it.
    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        write_atomic(&path, contents.as_bytes())?;
        self.record(name);
        Ok(path)
    }

    pub fn record(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    pub fn finish(self, config: serde_json::Value, master_seed: Option<u64>) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            config,
            master_seed,
            versions: Versions::current(),
            artifacts: self.artifacts,
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.out.join(RUN_MANIFEST_FILE), text.as_bytes())?;
        Ok(manifest)
    }
}

/// Write to a sibling temporary file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}
