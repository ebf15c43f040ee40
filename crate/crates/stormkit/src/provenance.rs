//! Run provenance: content hashes of every input and output artifact plus
//! the exact configuration, written as JSON next to each produced artifact.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProvenanceError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest error: {0}")]
    Parse(String),
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String, ProvenanceError> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Provenance record of one pipeline stage.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Path -> sha256 of every consumed artifact.
    pub inputs: BTreeMap<String, String>,
    /// Path -> sha256 of every produced artifact.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: serde_json::Value) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), ProvenanceError> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<(), ProvenanceError> {
        self.outputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Write the manifest as `<artifact>.prov.json`.
    pub fn save_for(&self, artifact: &Path) -> Result<(), ProvenanceError> {
        let mut p = artifact.as_os_str().to_owned();
        p.push(".prov.json");
        std::fs::write(p, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ProvenanceError> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| ProvenanceError::Parse(e.to_string()))
    }
}
