//! Run manifests: every command that writes an output directory drops a
//! `manifest.json` there with the resolved configuration, so the run can
//! be replayed exactly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::{internal, CliError};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, threads: Option<usize>) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: None,
            threads,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: impl AsRef<Path>) -> &mut Self {
        self.inputs
            .insert(name.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn output(&mut self, name: &str, path: impl AsRef<Path>) -> &mut Self {
        self.outputs
            .insert(name.to_string(), path.as_ref().display().to_string());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| internal(format!("cannot serialize manifest: {e}")))?;
        text.push('\n');
        std::fs::write(&path, text)
            .map_err(|e| internal(format!("cannot write {}: {e}", path.display())))
    }
}

/// Write a pretty-printed JSON report next to the manifest.
pub fn write_json(
    dir: &Path,
    name: &str,
    value: &impl Serialize,
) -> Result<std::path::PathBuf, CliError> {
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| internal(format!("cannot serialize {name}: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text)
        .map_err(|e| internal(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}
