//! Run manifests: what was invoked, on which inputs, producing which
//! artifacts. One manifest per artifact-producing run; reruns with the
//! same inputs and seed reproduce the artifacts byte for byte (only the
//! timestamps differ).

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use bytenet::{Error, Result};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    /// Resolved settings snapshot, or null for commands without one.
    pub config: serde_json::Value,
    pub seed: u64,
    /// SHA-256 of every input file, keyed by the path as given.
    pub inputs_sha256: BTreeMap<String, String>,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn begin(seed: u64) -> Self {
        RunManifest {
            command: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed,
            inputs_sha256: BTreeMap::new(),
            started: now(),
            finished: String::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn hash_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest: [u8; 32] = Sha256::digest(&bytes).into();
        self.inputs_sha256.insert(path.display().to_string(), hex::encode(digest));
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.finished = now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
