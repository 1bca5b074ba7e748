//! Run manifests: what ran, with which config and seed, over which files,
//! and how it ended. Written atomically (temp file + rename) so a manifest
//! is either absent or complete.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_snapshot: Option<serde_json::Value>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: String,
    pub status: String,
}

impl RunManifest {
    pub fn begin(command: &str) -> RunManifest {
        RunManifest {
            schema_version: 1,
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            seed: None,
            config_snapshot: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: now_rfc3339(),
            finished_at: String::new(),
            status: "running".to_string(),
        }
    }

    pub fn add_input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn add_output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Finalize and write atomically.
    pub fn finish(mut self, path: &Path, status: &str) -> Result<()> {
        self.finished_at = now_rfc3339();
        self.status = status.to_string();
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(&self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

fn now_rfc3339() -> String {
    let now: DateTime<Utc> = Utc::now();
    now.to_rfc3339()
}

/// Manifest location for a run whose primary output is `out`: a sibling
/// `manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}
