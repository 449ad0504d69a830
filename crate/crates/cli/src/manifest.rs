//! Run manifests: what ran, on which inputs, producing which outputs.
//!
//! The manifest is written next to the primary output (`<output>.manifest.json`)
//! rather than inside it, so output directories and containers stay
//! byte-identical across reruns while the manifest still records wall-clock
//! time. Input digests are FNV-1a 64 over the raw file bytes; recompute them
//! with the same hash to check staleness.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

/// FNV-1a 64-bit digest of a byte stream.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("digesting input {}", path.display()))?;
    Ok(format!("fnv1a64:{:016x}", fnv1a64(&bytes)))
}

#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub subcommand: String,
    /// Fully resolved arguments or recipe of the run.
    pub resolved: serde_json::Value,
    pub input_digests: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
}

pub struct ManifestBuilder {
    subcommand: String,
    resolved: serde_json::Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(subcommand: &str, resolved: serde_json::Value) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            resolved,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }

    /// Write `<primary>.manifest.json` atomically (temp file + rename).
    pub fn write(self, primary_output: &Path) -> Result<PathBuf> {
        let mut input_digests = BTreeMap::new();
        for path in &self.inputs {
            input_digests.insert(path.display().to_string(), digest_file(path)?);
        }
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand,
            resolved: self.resolved,
            input_digests,
            outputs: self
                .outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let path = PathBuf::from(format!("{}.manifest.json", primary_output.display()));
        let tmp = PathBuf::from(format!("{}.tmp", path.display()));
        std::fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        std::fs::rename(&tmp, &path)?;
        Ok(path)
    }
}
