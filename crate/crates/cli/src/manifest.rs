//! Run manifests written next to every artifact.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileFingerprint {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileFingerprint {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// What was run, on which inputs, producing which outputs. Contains no
/// timestamps or worker counts, so identical runs give identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub arguments: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model_fingerprint: Option<String>,
    pub inputs: Vec<FileFingerprint>,
    pub outputs: Vec<FileFingerprint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &'static str, arguments: &impl Serialize) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            arguments: serde_json::to_value(arguments)?,
            seed: None,
            model_fingerprint: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: None,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileFingerprint::of(path)?);
        Ok(())
    }

    /// Records every output and writes the manifest to
    /// `<first output>.manifest.json`.
    pub fn finish(mut self, outputs: &[&Path]) -> Result<PathBuf> {
        for p in outputs {
            self.outputs.push(FileFingerprint::of(p)?);
        }
        let first = outputs.first().context("manifest without outputs")?;
        let mut name = first.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let mut text = serde_json::to_string_pretty(&self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
