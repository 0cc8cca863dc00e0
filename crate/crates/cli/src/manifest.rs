use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Cli;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Everything needed to reproduce a run: the parsed command line (output
/// directory excluded), the resolved parameters, the seed, and digests of
/// every input and output file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub cli: Cli,
    pub config: serde_json::Value,
    pub base_seed: u64,
    pub tool_version: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects input and output files while a command runs.
#[derive(Debug, Default)]
pub struct Artifacts {
    pub inputs: Vec<PathBuf>,
    /// Output file names relative to the output directory.
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
}

impl Artifacts {
    /// Records an input file together with any companion files that were
    /// read alongside it.
    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn trace_input(&mut self, path: &Path) {
        self.input(path);
        for companion in [
            stpad_core::trace::labels_path_for(path),
            stpad_core::trace::meta_path_for(path),
        ] {
            if companion.exists() {
                self.inputs.push(companion);
            }
        }
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }
}

pub fn digest_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

pub fn digest_outputs(dir: &Path, names: &[String]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.clone(), sha256_file(&dir.join(n))?)))
        .collect()
}

pub fn write(dir: &Path, m: &RunManifest) -> Result<()> {
    let mut s = serde_json::to_string_pretty(m)?;
    s.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<RunManifest> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing manifest {}", path.display()))
}
