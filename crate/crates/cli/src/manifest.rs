use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation: enough to re-run it and to check that
/// the re-run reproduced the same metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, `--out` removed.
    pub argv: Vec<String>,
    /// Fully resolved configuration the command ran with.
    pub config: Value,
    pub seed: u64,
    pub threads: usize,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub metrics: Value,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<RunManifest> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(std::io::Error::other)
    }

    pub fn save(&self, dir: &Path) -> std::io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(MANIFEST_FILE), text + "\n")
    }
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Drops `--out <dir>` / `--out=<dir>` from an argument list.
pub fn strip_out(argv: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(argv.len());
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--out" {
            skip = true;
        } else if !a.starts_with("--out=") {
            out.push(a.clone());
        }
    }
    out
}
