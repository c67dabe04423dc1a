//! Atomic artifact emission and the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Write bytes to `dir/name` via a temp file in the same directory plus
/// rename, so an interrupted run never leaves a truncated artifact.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| e.error)?;
    Ok(path)
}

pub fn write_json_atomic<T: Serialize>(
    dir: &Path,
    name: &str,
    value: &T,
) -> std::io::Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(dir, name, text.as_bytes())
}

/// Provenance record for a run: config hash, seeds, version, wall time,
/// and the artifacts produced.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub schema: &'static str,
    pub tool_version: &'static str,
    pub mode: String,
    pub config_hash: String,
    pub seed: u64,
    pub resolved_size: Option<(usize, usize)>,
    pub wall_time_ms: u128,
    pub created_unix: u64,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(mode: String, config_hash: String, seed: u64) -> Self {
        Manifest {
            schema: "amp-evolve manifest v1",
            tool_version: env!("CARGO_PKG_VERSION"),
            mode,
            config_hash,
            seed,
            resolved_size: None,
            wall_time_ms: 0,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            artifacts: Vec::new(),
        }
    }

    pub fn record(&mut self, path: &Path) {
        self.artifacts.push(path.display().to_string());
    }
}
