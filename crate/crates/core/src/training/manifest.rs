//! Run manifest written next to every training output.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::MetricReport;

/// Git-style blob hash: SHA-256 over `"blob <len>\0"` followed by the bytes.
pub fn corpus_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn corpus_hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(corpus_hash(&bytes))
}

/// Wall-clock information lives in its own field so the rest of the manifest
/// is reproducible byte for byte.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub corpus_hash: Option<String>,
    pub loss_trace: serde_json::Map<String, serde_json::Value>,
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub outputs: Vec<String>,
    pub timing: Timing,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            command: command.into(),
            config,
            corpus_hash: None,
            loss_trace: Default::default(),
            metrics: Default::default(),
            outputs: Vec::new(),
            timing: Timing::default(),
        }
    }

    pub fn add_trace(&mut self, name: &str, trace: &[f64]) {
        self.loss_trace.insert(name.into(), serde_json::json!(trace));
    }

    pub fn add_metrics(&mut self, name: &str, report: &MetricReport) {
        self.metrics
            .insert(name.into(), serde_json::to_value(report).expect("report serializes"));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
