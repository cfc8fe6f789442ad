//! Run manifests: config snapshot, master seed, module versions and the
//! sha256 digest of every input and output file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hclnet::config::{PipelineConfig, KEYS};
use hclnet::io::{read_file, write_atomic};
use hclnet::Result;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

impl FileDigest {
    fn of(path: &Path, bytes: &[u8]) -> Self {
        Self { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)), bytes: bytes.len() }
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub modules: BTreeMap<&'static str, &'static str>,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let modules = BTreeMap::from([
            ("hclnet", hclnet::VERSION),
            ("hcl-autodiff", hcl_autodiff::VERSION),
            ("hclnet-cli", env!("CARGO_PKG_VERSION")),
        ]);
        Self { command: command.into(), modules, seed: 0, config: BTreeMap::new(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn set_config(&mut self, cfg: &PipelineConfig) {
        self.seed = cfg.seed;
        self.config = KEYS.iter().map(|k| (k.to_string(), cfg.get(k).expect("documented key"))).collect();
    }

    /// Reads an input file and records its digest.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_file(path)?;
        self.inputs.push(FileDigest::of(path, &bytes));
        Ok(bytes)
    }

    /// Writes an output atomically and records its digest.
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.outputs.retain(|o| o.path != path.display().to_string());
        self.outputs.push(FileDigest::of(path, bytes));
        Ok(())
    }

    /// Writes the manifest to `explicit`, or next to the first output.
    pub fn finish(&self, explicit: Option<&Path>) -> Result<PathBuf> {
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => {
                let first = self.outputs.first().map_or("hclnet", |o| o.path.as_str());
                PathBuf::from(format!("{first}.manifest.json"))
            }
        };
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}
