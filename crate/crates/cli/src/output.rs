use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Output directory that records a digest of every file it writes.
pub struct OutputDir {
    root: PathBuf,
    written: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            written: BTreeMap::new(),
        })
    }

    fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.written.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write_bytes(name, &bytes)
    }

    /// Writes `manifest.json` listing every output and its digest.
    pub fn finish(mut self, manifest: Manifest) -> Result<()> {
        let manifest = Manifest {
            outputs: std::mem::take(&mut self.written),
            ..manifest
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        let path = self.root.join("manifest.json");
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub subcommand: String,
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Digest of each input file.
    pub inputs: BTreeMap<String, String>,
    /// Digest of each output file.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub passed: bool,
}
