use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("output types always serialize");
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved settings, defaults included.
    pub settings: serde_json::Value,
    pub seed: Option<u64>,
    pub engine_version: &'static str,
    pub snapshot_sha256: Option<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: Vec<PathBuf>,
}

/// Collects outputs as a command writes them.
pub struct Run {
    manifest: RunManifest,
}

impl Run {
    pub fn start(command: &str) -> Self {
        Run {
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                settings: serde_json::Value::Null,
                seed: None,
                engine_version: env!("CARGO_PKG_VERSION"),
                snapshot_sha256: None,
                started_unix_ms: unix_ms(),
                finished_unix_ms: 0,
                outputs: Vec::new(),
            },
        }
    }

    pub fn settings(&mut self, settings: impl Serialize, seed: Option<u64>) {
        self.manifest.settings = serde_json::to_value(settings).expect("settings serialize");
        self.manifest.seed = seed;
    }

    pub fn snapshot(&mut self, sha256: String) {
        self.manifest.snapshot_sha256 = Some(sha256);
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, path: PathBuf, value: &T) -> Result<(), CliError> {
        write_json(&path, value)?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    pub fn bytes(&mut self, path: PathBuf, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&path, bytes)?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> Result<(), CliError> {
        self.manifest.finished_unix_ms = unix_ms();
        write_json(&dir.join(RUN_MANIFEST), &self.manifest)
    }
}
