//! Run manifest: what was run, with which inputs, and what it wrote.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::SimGeometry;
use crate::io::sha256_hex;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Full configuration as parsed, including defaults.
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub geometry_hash: String,
    /// Seconds since the Unix epoch.
    pub started: f64,
    pub finished: f64,
    /// Modelling choices that affect the numbers, e.g. the symbol model.
    pub notes: Vec<String>,
    pub outputs: Vec<OutputEntry>,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// SHA-256 of the geometry's canonical JSON encoding.
pub fn geometry_hash(geom: &SimGeometry) -> String {
    sha256_hex(&serde_json::to_vec(geom).expect("geometry serializes"))
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, geom: &SimGeometry) -> Result<Self> {
        Ok(Self {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seeds: vec![],
            geometry_hash: geometry_hash(geom),
            started: unix_now(),
            finished: 0.0,
            notes: vec![],
            outputs: vec![],
        })
    }

    /// Records a file that has already been written.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.outputs.push(OutputEntry {
            path: path.to_path_buf(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(())
    }

    /// Stamps the finish time and writes pretty JSON.
    pub fn finish(&mut self, path: &Path) -> Result<()> {
        self.finished = unix_now();
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
