use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct InputRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// One per run: enough to repeat the command and check its inputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputRecord>,
    pub seed: Option<u64>,
    pub jobs: usize,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
    #[serde(skip)]
    started: Option<Instant>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RunManifest {
    pub fn start(command: &'static str, config: &impl Serialize, jobs: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().collect(),
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: Vec::new(),
            seed: None,
            jobs,
            wall_time_s: 0.0,
            outputs: Vec::new(),
            results: serde_json::Value::Null,
            started: Some(Instant::now()),
        }
    }

    /// Reads an input file, recording its size and digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(mut self, path: &Path) -> Result<(), CliError> {
        if let Some(t) = self.started.take() {
            self.wall_time_s = t.elapsed().as_secs_f64();
        }
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(path, json + "\n").map_err(|e| CliError::io(path, e))
    }
}

/// `path` with `suffix` appended to its final component.
pub fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn suffix_appends() {
        assert_eq!(
            suffixed(Path::new("a/b.nrvc"), ".manifest.json"),
            PathBuf::from("a/b.nrvc.manifest.json")
        );
    }
}
