use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::{Failure, Outcome};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every output artifact.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub rng: &'static str,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub threads: usize,
    pub wall_time_secs: f64,
}

/// Collects inputs, seeds and outputs while a command runs.
pub struct Run {
    command: String,
    started: Instant,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<InputDigest>,
    outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Run {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            started: Instant::now(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Reads a whole input file and records its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>, Failure> {
        let bytes = std::fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(bytes)
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes the manifest to `path` and passes the command's outcome through.
    pub fn finish(self, path: &Path, outcome: Outcome) -> Result<Outcome, Failure> {
        let manifest = RunManifest {
            tool: "plusdc",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            argv: std::env::args().collect(),
            seeds: self.seeds,
            rng: plusdc::rng::RNG_NAME,
            inputs: self.inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            threads: rayon::current_num_threads(),
            wall_time_secs: self.started.elapsed().as_secs_f64(),
        };
        crate::commands::write_json(path, &manifest)?;
        Ok(outcome)
    }
}

/// `<artifact>.manifest.json` beside a single-file output.
pub fn beside(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
