use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;

pub const MANIFEST_NAME: &str = "manifest.json";

/// Record of one invocation: what ran, with which inputs, and what it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub exit_code: i32,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: Option<&Path>) -> Self {
        Self {
            command: command.to_string(),
            config: config.map(Path::to_path_buf),
            inputs: Vec::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: None,
            exit_code: 0,
        }
    }

    /// Writes `contents` under `dir` and lists the file as an output.
    pub fn write(&mut self, dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    /// Stamps the finish time and writes the manifest itself, listed last.
    pub fn finish(mut self, dir: &Path, exit_code: i32) -> Result<PathBuf> {
        self.finished_at = Some(now());
        self.exit_code = exit_code;
        let path = dir.join(MANIFEST_NAME);
        self.outputs.push(path.clone());
        let text = serde_json::to_string_pretty(&self)? + "\n";
        fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}
