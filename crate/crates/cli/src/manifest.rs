//! Run manifest: what went in, what came out, and how long it took.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| {
        CliError::validation(
            format!("cannot read {}: {e}", path.display()),
            Some(path.display().to_string()),
        )
    })?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: serde_json::Value,
    /// Input role to sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name, relative to the manifest, to sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    /// Stage name to wall time in milliseconds.
    pub timings_ms: BTreeMap<String, f64>,
    pub backend_calls: usize,
    pub cache_hits: usize,
}

impl RunManifest {
    pub fn new(config: serde_json::Value) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
            backend_calls: 0,
            cache_hits: 0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::parse(format!("manifest: {e}")))
    }

    /// Output files whose current digest differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>, CliError> {
        let mut bad = Vec::new();
        for (name, digest) in &self.outputs {
            if file_digest(&dir.join(name))? != *digest {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }
}
