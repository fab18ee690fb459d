//! Run manifests: what was run, with which settings, on which files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::{Failure, EXIT_IO};

/// SHA-256 over `"blob <len>\0" + contents`, the git object hashing scheme.
pub fn blob_hash(contents: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", contents.len()).as_bytes());
    h.update(contents);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<Value, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure {
        code: EXIT_IO,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    Ok(json!({
        "path": path.display().to_string(),
        "bytes": bytes.len(),
        "sha256_blob": blob_hash(&bytes),
    }))
}

pub struct RunManifest {
    command: &'static str,
    config: Map<String, Value>,
    seeds: Map<String, Value>,
    inputs: Vec<Value>,
    outputs: Vec<Value>,
}

impl RunManifest {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            config: Map::new(),
            seeds: Map::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, pairs: &[(&str, String)]) {
        for (k, v) in pairs {
            self.config.insert((*k).into(), Value::String(v.clone()));
        }
    }

    /// Records every `key=value` line of a serialized configuration.
    pub fn config_kv(&mut self, text: &str) {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config.insert(k.into(), Value::String(v.into()));
            }
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.into(), json!(value));
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        self.inputs.push(hash_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), Failure> {
        self.outputs.push(hash_file(path)?);
        Ok(())
    }

    pub fn finish(self, start: Instant, path: &Path) -> Result<(), Failure> {
        let doc = json!({
            "command": self.command,
            "rkn_version": env!("CARGO_PKG_VERSION"),
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "wall_clock_seconds": start.elapsed().as_secs_f64(),
        });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serializes") + "\n";
        fs::write(path, text).map_err(|e| Failure {
            code: EXIT_IO,
            msg: format!("cannot write {}: {e}", path.display()),
        })
    }
}
