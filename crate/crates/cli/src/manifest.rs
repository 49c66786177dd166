use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

/// Record of how an output was produced: rerunning `argv` with the same
/// inputs reproduces it.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub argv: Vec<String>,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &'static str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command,
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing manifest {}", path.display()))
    }
}

/// `<file>.manifest.json` next to `file`.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}
