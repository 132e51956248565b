//! Append-only run manifests (`runs.jsonl`), one JSON line per invocation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;

pub const RUNS_FILE: &str = "runs.jsonl";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
    pub success: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// What a command reports about itself while it runs.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Directory that receives `runs.jsonl`.
    pub manifest_dir: Option<PathBuf>,
}

impl RunRecord {
    pub fn config(&mut self, value: &impl Serialize) -> anyhow::Result<()> {
        self.config = serde_json::to_value(value)?;
        log::info!("resolved config: {}", self.config);
        Ok(())
    }
}

pub fn append(dir: &Path, manifest: &RunManifest) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RUNS_FILE);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(file, "{}", serde_json::to_string(manifest)?)?;
    Ok(())
}

pub fn finish(command: &str, started: Instant, record: RunRecord, result: &anyhow::Result<()>) -> anyhow::Result<()> {
    let Some(dir) = record.manifest_dir.clone() else {
        return Ok(());
    };
    let manifest = RunManifest {
        command: command.to_string(),
        args: std::env::args().collect(),
        config: record.config,
        seeds: record.seeds,
        inputs: record.inputs,
        outputs: record.outputs,
        version: env!("CARGO_PKG_VERSION").to_string(),
        duration_secs: started.elapsed().as_secs_f64(),
        success: result.is_ok(),
        error: result.as_ref().err().map(|e| format!("{e:#}")),
    };
    append(&dir, &manifest)
}
