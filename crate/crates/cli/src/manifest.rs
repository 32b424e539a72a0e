//! Run manifest and the output directory it describes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub start_time: u64,
    pub output_dir: String,
    /// Relative artifact path to its content hash.
    pub artifacts: BTreeMap<String, String>,
    /// `running`, `complete` or `failed: <reason>`.
    pub status: String,
}

/// SHA-256 of `"blob <len>\0" + content`, the object-id scheme git uses.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// An output directory owned by one run. The manifest is written on
/// creation and rewritten after every artifact.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    manifest: RunManifest,
}

impl OutputDir {
    pub fn create(root: &Path, command: &str, config: BTreeMap<String, String>, seed: u64) -> Result<Self, CliError> {
        if root.join(MANIFEST_FILE).exists() {
            return Err(CliError::Io(format!(
                "{} already holds a run; choose a fresh --out directory",
                root.display()
            )));
        }
        std::fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let start_time = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let out = Self {
            root: root.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                config,
                seed,
                start_time,
                output_dir: root.display().to_string(),
                artifacts: BTreeMap::new(),
                status: "running".into(),
            },
        };
        out.save_manifest()?;
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn save_manifest(&self) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
    }

    /// Writes `bytes` to `relative` under the root and records its hash.
    pub fn write(&mut self, relative: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.root.join(relative);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.manifest.artifacts.insert(relative.into(), content_hash(bytes));
        self.save_manifest()?;
        Ok(path)
    }

    pub fn finish(&mut self, status: &str) -> Result<(), CliError> {
        self.manifest.status = status.into();
        self.save_manifest()
    }
}
