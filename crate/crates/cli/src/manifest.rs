// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use adc_core::catalog::tiles::write_atomic;

/// Record of one CLI run, written beside its outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub versions: BTreeMap<String, String>,
    /// Output path, relative to the manifest's directory → sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub exit_code: i32,
    pub error: Option<String>,
    #[serde(skip)]
    base: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

impl RunManifest {
    /// A manifest that will be written to `path`.
    pub fn new(command: Vec<String>, path: &Path) -> RunManifest {
        let versions = [("adc".to_string(), env!("CARGO_PKG_VERSION").to_string())].into();
        RunManifest { command, config_sha256: None, seed: None, versions, outputs: BTreeMap::new(), wall_time_s: 0.0, exit_code: 0, error: None, base: path.parent().map(Path::to_path_buf).unwrap_or_default() }
    }

    pub fn add_output(&mut self, path: &Path) -> std::io::Result<()> {
        let key = path.strip_prefix(&self.base).unwrap_or(path);
        self.outputs.insert(key.display().to_string(), file_sha256(path)?);
        Ok(())
    }

    /// Every regular file under `dir` except run manifests, in path order.
    pub fn add_tree(&mut self, dir: &Path) -> std::io::Result<()> {
        let mut stack = vec![dir.to_path_buf()];
        let mut files: Vec<PathBuf> = Vec::new();
        while let Some(d) = stack.pop() {
            for entry in fs::read_dir(&d)? {
                let p = entry?.path();
                if p.is_dir() {
                    stack.push(p);
                } else if !p.to_string_lossy().ends_with("manifest.json") {
                    files.push(p);
                }
            }
        }
        files.sort();
        for f in files {
            self.add_output(&f)?;
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        write_atomic(path, format!("{text}\n").as_bytes()).map_err(std::io::Error::other)
    }
}
