//! Run manifests: enough to check and reproduce every output of a run.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const CONFIG_NAME: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub build: String,
    pub seed: u64,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub config: String,
    pub outputs: Vec<OutputFile>,
}

pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    format!("skwsim-core {} {}-{} {profile}", env!("CARGO_PKG_VERSION"), std::env::consts::ARCH, std::env::consts::OS)
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64())
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

pub(crate) struct ManifestBuilder {
    dir: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    started: f64,
}

impl ManifestBuilder {
    pub fn start(command: &str, cfg: &ExperimentConfig, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_NAME), cfg.to_json())?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            started: now(),
        })
    }

    pub fn finish(&mut self, files: &[&str]) -> Result<RunManifest> {
        let outputs = files
            .iter()
            .map(|name| {
                let (sha256, bytes) = sha256_file(&self.dir.join(name))?;
                Ok(OutputFile { name: name.to_string(), sha256, bytes })
            })
            .collect::<Result<_>>()?;
        let manifest = RunManifest {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            build: build_id(),
            seed: self.seed,
            started_unix: self.started,
            finished_unix: now(),
            config: CONFIG_NAME.into(),
            outputs,
        };
        std::fs::write(self.dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Manifest { path: path.clone(), reason: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest { path, reason: e.to_string() })
    }

    /// Check the stored config and every output against their recorded hashes.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        let bad = |name: &str, reason: String| Error::Manifest { path: dir.join(name), reason };
        let cfg = ExperimentConfig::load(&dir.join(&self.config)).map_err(|e| bad(&self.config, e.to_string()))?;
        if cfg.hash() != self.config_hash {
            return Err(bad(&self.config, "config hash mismatch".into()));
        }
        for f in &self.outputs {
            let (sha, bytes) = sha256_file(&dir.join(&f.name)).map_err(|e| bad(&f.name, e.to_string()))?;
            if sha != f.sha256 || bytes != f.bytes {
                return Err(bad(&f.name, format!("hash mismatch: recorded {}, found {sha}", f.sha256)));
            }
        }
        Ok(())
    }
}
