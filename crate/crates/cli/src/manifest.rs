use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Reproducibility record written next to a command's primary output.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_sha256: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// Tracks the files a command reads and writes.
#[derive(Debug, Default)]
pub struct Recorder {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn input(&mut self, p: &Path) -> PathBuf {
        if !self.inputs.iter().any(|q| q == p) {
            self.inputs.push(p.to_path_buf());
        }
        p.to_path_buf()
    }

    pub fn write(&mut self, p: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
        std::fs::write(p, bytes)?;
        self.outputs.push(p.to_path_buf());
        Ok(())
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    /// Writes `<primary>.manifest.json`.
    pub fn finish(
        self,
        command: &str,
        seed: u64,
        config: &RunConfig,
        primary: &Path,
    ) -> Result<PathBuf, CliError> {
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: sha256_hex(config.to_json().as_bytes()),
            config: config.clone(),
            inputs: self
                .inputs
                .iter()
                .map(|p| digest(p))
                .collect::<Result<_, _>>()?,
            outputs: self
                .outputs
                .iter()
                .map(|p| digest(p))
                .collect::<Result<_, _>>()?,
        };
        let mut name = primary.as_os_str().to_owned();
        name.push(".manifest.json");
        let path = PathBuf::from(name);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}
