//! Run manifests: the resolved configuration of a command, the digests of
//! its inputs and the files it wrote.

use std::fs;
use std::path::{Path, PathBuf};

use colln_core::model::TraceLevel;
use colln_core::pruning::{Method, PruneConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    Weights(PathBuf),
    /// Architecture preset with seeded random weights.
    Preset(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRequest {
    pub model: ModelSource,
    pub image: PathBuf,
    pub config: PruneConfig,
    pub trace: TraceLevel,
    pub heatmaps: bool,
    pub upscale: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresRequest {
    pub model: ModelSource,
    pub image: PathBuf,
    pub config: PruneConfig,
    pub norms: Vec<f64>,
    pub upscale: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRequest {
    pub model: ModelSource,
    pub image_dir: PathBuf,
    pub metrics: Vec<Method>,
    pub norms: Vec<f64>,
    pub schedules: Vec<Vec<usize>>,
    pub keep_rates: Vec<f64>,
    /// Method-independent settings shared by every compared run.
    pub base: PruneConfig,
    pub labels: Option<PathBuf>,
    /// File name of the report inside the output directory.
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", content = "config", rename_all = "kebab-case")]
pub enum RunConfig {
    Prune(PruneRequest),
    Scores(ScoresRequest),
    Compare(CompareRequest),
    TinyPreset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    #[serde(flatten)]
    pub run: RunConfig,
    pub inputs: Vec<InputDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads an input file and records its digest.
pub fn read_input(path: &Path, role: &str) -> Result<(Vec<u8>, InputDigest)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let digest = InputDigest {
        role: role.to_string(),
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    };
    Ok((bytes, digest))
}

/// Checks that every recorded input still has the recorded digest.
pub fn check_inputs(inputs: &[InputDigest]) -> Result<()> {
    for d in inputs {
        let bytes = fs::read(&d.path).map_err(|e| CliError::io(&d.path, e))?;
        let found = sha256_hex(&bytes);
        if found != d.sha256 {
            return Err(CliError::Format(format!(
                "{} ({}) changed: sha256 {found}, manifest has {}",
                d.path.display(),
                d.role,
                d.sha256
            )));
        }
    }
    Ok(())
}
