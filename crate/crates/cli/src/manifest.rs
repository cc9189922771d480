use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Record of one invocation, written next to its outputs.
pub struct Manifest {
    command: String,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<PathBuf>,
    extra: serde_json::Map<String, Value>,
    started: Instant,
}

/// SHA-256 of a file, or of every file in a directory in name order.
pub fn hash_path(path: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    let read = |p: &Path| fs::read(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())));
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        for p in entries {
            h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
            h.update(read(&p)?);
        }
    } else {
        h.update(read(path)?);
    }
    Ok(format!("{:x}", h.finalize()))
}

impl Manifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Default::default(),
            started: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = hash_path(path)?;
        self.inputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn note(&mut self, key: &str, value: Value) {
        self.extra.insert(key.to_string(), value);
    }

    pub fn write(self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join("manifest.json");
        let doc = json!({
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs.iter().map(|(p, h)| json!({"path": p, "sha256": h})).collect::<Vec<_>>(),
            "outputs": self.outputs,
            "results": self.extra,
            "wall_clock_s": self.started.elapsed().as_secs_f64(),
            "code_version": env!("CARGO_PKG_VERSION"),
        });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serialises");
        fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
