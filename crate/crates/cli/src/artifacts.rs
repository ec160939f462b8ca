//! Artifact files and manifests.
//!
//! Layout: `<out>/<subcommand>/<name>.{json,csv}` plus
//! `<out>/<subcommand>/manifest.json`. Nothing time-dependent is written,
//! so equal configs give byte-identical directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};

pub const MANIFEST: &str = "manifest.json";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub tool: String,
    pub library_version: String,
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub files: Vec<FileEntry>,
}

/// Collects one subcommand's files; the manifest is written by [`finish`](Self::finish).
pub struct ArtifactWriter {
    dir: PathBuf,
    manifest: Manifest,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Shortest text that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x}")
}

impl ArtifactWriter {
    pub fn new(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        let dir = out.join(command.replace('-', "_"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut config = cfg.clone();
        config.output_dir = PathBuf::new();
        Ok(Self {
            dir,
            manifest: Manifest {
                format_version: MANIFEST_FORMAT_VERSION,
                tool: "tavlab".into(),
                library_version: tavlab::VERSION.into(),
                command: command.into(),
                config_hash: cfg.hash(),
                config,
                files: Vec::new(),
            },
        })
    }

    fn put(&mut self, file: String, bytes: Vec<u8>) -> Result<()> {
        let path = self.dir.join(&file);
        fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.files.push(FileEntry {
            name: file,
            sha256: sha256_hex(&bytes),
            bytes: bytes.len(),
        });
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put(format!("{name}.json"), bytes)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for row in rows {
            w.write_record(row)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.put(format!("{name}.csv"), bytes)
    }

    pub fn finish(self) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        let path = self.dir.join(MANIFEST);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.dir)
    }
}
