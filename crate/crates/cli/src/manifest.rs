//! Run manifests: everything needed to reproduce an output file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub toolkit_version: &'static str,
    pub command: &'static str,
    /// Every flag after defaults are resolved.
    pub args: serde_json::Value,
    /// SHA-256 of each input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub rng_algorithm: &'static str,
    pub outputs: Vec<String>,
    /// Command-specific facts about the run (fitted temperatures, counts).
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new<A: Serialize>(command: &'static str, args: &A, seed: Option<u64>) -> Result<Self, CliError> {
        Ok(Self {
            toolkit_version: env!("CARGO_PKG_VERSION"),
            command,
            args: serde_json::to_value(args).map_err(|e| CliError::usage(format!("cannot record arguments: {e}")))?,
            inputs: BTreeMap::new(),
            seed,
            rng_algorithm: crowd_centroid::rng::ALGORITHM,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::read(path, e))?;
        self.inputs
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| CliError::write(path, e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| CliError::write(path, e))
    }
}
