//! Run manifests: enough provenance to re-run a command identically.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use maplabel::ingest::{GROUND_TRUTH_FILE, MANIFEST_FILE, MAPS_DIR, MAP_FILE, TEXT_FILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::Config;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Error,
    Cancelled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: Config,
    pub dataset_hash: Option<String>,
    pub store_hash: Option<String>,
    pub model_id: Option<String>,
    pub template_version: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub outputs: Vec<PathBuf>,
    pub errors: Vec<ErrorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: Config) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            args,
            config,
            dataset_hash: None,
            store_hash: None,
            model_id: None,
            template_version: None,
            seeds: BTreeMap::new(),
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            outputs: Vec::new(),
            errors: Vec::new(),
            summary: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.status = status;
        self.finished_at = Some(now());
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn hash_into(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let mut file = fs::File::open(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(())
}

/// SHA-256 of one file, hex encoded.
pub fn hash_file(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hash_into(&mut hasher, path)?;
    Ok(hex(&hasher.finalize()))
}

/// SHA-256 over the dataset's data files in sorted path order. Each file
/// contributes its relative path and contents, so renames change the hash.
/// Images, reports and manifests written next to the data are ignored.
pub fn hash_dataset(root: &Path) -> Result<String> {
    let data_names = [MAP_FILE, TEXT_FILE, GROUND_TRUTH_FILE];
    let mut files = vec![PathBuf::from(MANIFEST_FILE)];
    for entry in WalkDir::new(root.join(MAPS_DIR)).min_depth(2).max_depth(2).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", root.display()))?;
        let name = entry.file_name().to_string_lossy();
        if entry.file_type().is_file() && data_names.contains(&name.as_ref()) {
            files.push(entry.path().strip_prefix(root)?.to_path_buf());
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let rel_str = rel.to_string_lossy().replace('\\', "/");
        hasher.update((rel_str.len() as u64).to_le_bytes());
        hasher.update(rel_str.as_bytes());
        let mut inner = Sha256::new();
        hash_into(&mut inner, &root.join(&rel))?;
        hasher.update(inner.finalize());
    }
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
