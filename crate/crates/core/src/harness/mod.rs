//! Experiment configuration, run manifests and the command implementations
//! behind the `bino` binary.

pub mod commands;
pub mod config;
pub mod probe;
pub mod train;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{BinoError, Result};

pub use config::ExperimentConfig;

pub const THREADS_ENV: &str = "BINO_THREADS";
pub const RUN_MANIFEST_NAME: &str = "run_manifest.json";
pub const CODE_VERSION: &str = concat!("bino-core ", env!("CARGO_PKG_VERSION"));

/// Worker cap: `BINO_THREADS` if set to a positive integer, else the machine's parallelism.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Order-preserving parallel map over contiguous chunks.
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    let workers = worker_count().min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, t)| f(c * chunk + j, t))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seed: u64,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub outputs: Vec<String>,
    #[serde(skip)]
    path: PathBuf,
}

impl RunManifest {
    /// Writes the manifest to `path` with status `running`.
    pub fn begin(path: &Path, command: &str, echo: &[(String, String)], seed: u64) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| BinoError::io(dir, e))?;
        }
        let m = RunManifest {
            command: command.into(),
            config: echo.iter().cloned().collect(),
            seed,
            code_version: CODE_VERSION.into(),
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
            outputs: Vec::new(),
            path: path.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn add_output(&mut self, path: &Path) {
        let p = path.display().to_string();
        if !self.outputs.contains(&p) {
            self.outputs.push(p);
        }
    }

    /// Records the final status (`ok` or the error) and rewrites the manifest.
    pub fn finish<T>(mut self, outcome: &Result<T>) -> Result<()> {
        self.finished_unix = Some(unix_now());
        self.status = match outcome {
            Ok(_) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.write()
    }

    fn write(&self) -> Result<()> {
        write_json(&self.path, &serde_json::to_value(self).expect("manifest serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BinoError::io(path, e))?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| BinoError::Data(format!("{}: {e}", path.display())))?;
        m.path = path.to_path_buf();
        Ok(m)
    }
}

/// Pretty JSON with a trailing newline. Object keys come out sorted.
pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("json value serializes");
    s.push('\n');
    std::fs::write(path, s).map_err(|e| BinoError::io(path, e))
}

/// Manifest path for a command whose main output is the file `out`.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.run.json"))
}

/// Report skeleton shared by every command.
pub fn report(command: &str, echo: &[(String, String)], seed: u64, provenance: Value, metrics: Value) -> Value {
    let config: BTreeMap<&str, &str> = echo.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
    serde_json::json!({
        "command": command,
        "code_version": CODE_VERSION,
        "seed": seed,
        "config": config,
        "provenance": provenance,
        "metrics": metrics,
    })
}
