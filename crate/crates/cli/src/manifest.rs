//! Per-run manifest written into every output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use iol_core::config::RunConfig;
use iol_core::IolError;
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub build: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig, seed: u64) -> Self {
        let build = match option_env!("IOL_BUILD_ID") {
            Some(id) => format!("iol {} ({id})", env!("CARGO_PKG_VERSION")),
            None => format!("iol {}", env!("CARGO_PKG_VERSION")),
        };
        RunManifest {
            command: command.to_string(),
            build,
            seed,
            config: config.clone(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.to_string(), path.to_path_buf());
    }

    pub fn output(&mut self, file: &str) {
        self.outputs.push(file.to_string());
    }

    pub fn finish(mut self, out_dir: &Path) -> Result<(), IolError> {
        self.finished_unix_ms = unix_ms();
        let path = out_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self).map_err(|e| IolError::Validation(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| IolError::io(path, e))
    }
}

/// Creates `dir`, refusing to write into a non-empty one unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), IolError> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| IolError::io(dir, e))?;
        if entries.next().is_some() && !force {
            return Err(IolError::Validation(format!(
                "output directory {} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| IolError::io(dir, e))
}
