//! Run manifests: the resolved config plus content hashes of every file
//! a command read or wrote. Two runs with the same inputs must produce
//! byte-identical manifests, so there are no timestamps or host details.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    /// The fully resolved config, defaults included.
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    /// name -> sha256 of files the command consumed.
    pub inputs: BTreeMap<String, String>,
    /// name -> sha256 of files the command produced.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            config: cfg.clone(),
            config_hash: cfg.hash_hex(),
            seed: cfg.seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn record_output(&mut self, name: &str, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json_pretty())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("manifest {}: {e}", path.display())))
    }
}
