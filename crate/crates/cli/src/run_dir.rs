use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Failure;

/// Git-style object hash: sha256 over `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub name: String,
    /// Absent for wall-clock measurements, which differ between runs.
    pub hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: String,
    /// Hash over the resolved config and every input hash.
    pub input_hash: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<OutputRecord>,
}

/// Hashes of the files a command reads, taken before any output exists.
#[derive(Debug, Default)]
pub struct Inputs {
    records: Vec<InputRecord>,
}

impl Inputs {
    pub fn add(&mut self, role: &str, path: &Path) -> Result<(), Failure> {
        let bytes = std::fs::read(path)
            .map_err(|e| Failure::usage(format!("cannot read {role} {}: {e}", path.display())))?;
        self.records.push(InputRecord {
            role: role.to_string(),
            path: path.display().to_string(),
            hash: blob_hash(&bytes),
        });
        Ok(())
    }
}

pub struct RunDir {
    pub path: PathBuf,
    command: String,
    args: Vec<String>,
    seed: u64,
    config: String,
    inputs: Vec<InputRecord>,
    outputs: Vec<OutputRecord>,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";

impl RunDir {
    /// Creates the directory and writes the resolved config.
    pub fn create(path: &Path, command: &str, args: Vec<String>, seed: u64, config_toml: String, inputs: Inputs) -> Result<Self, Failure> {
        std::fs::create_dir_all(path)
            .map_err(|e| Failure::data(format!("cannot create {}: {e}", path.display())))?;
        let mut dir = Self {
            path: path.to_path_buf(),
            command: command.to_string(),
            args,
            seed,
            config: config_toml.clone(),
            inputs: inputs.records,
            outputs: Vec::new(),
        };
        dir.write_file(CONFIG_FILE, config_toml.as_bytes(), false)?;
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn write_file(&mut self, name: &str, bytes: &[u8], volatile: bool) -> Result<(), Failure> {
        let path = self.file(name);
        std::fs::write(&path, bytes).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
        self.outputs.push(OutputRecord {
            name: name.to_string(),
            hash: (!volatile).then(|| blob_hash(bytes)),
        });
        Ok(())
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
        self.write_file(name, contents.as_ref(), false)
    }

    /// Timing output: recorded in the manifest without a hash.
    pub fn write_volatile(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
        self.write_file(name, contents.as_ref(), true)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::data(e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    /// Records a file some library call already wrote into the directory.
    pub fn adopt(&mut self, name: &str) -> Result<(), Failure> {
        let path = self.file(name);
        let bytes = std::fs::read(&path).map_err(|e| Failure::data(format!("cannot read {}: {e}", path.display())))?;
        self.outputs.push(OutputRecord {
            name: name.to_string(),
            hash: Some(blob_hash(&bytes)),
        });
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf, Failure> {
        let mut h = Sha256::new();
        h.update(blob_hash(self.config.as_bytes()).as_bytes());
        for r in &self.inputs {
            h.update(format!("\n{} {}", r.role, r.hash).as_bytes());
        }
        self.outputs.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.clone(),
            args: self.args.clone(),
            seed: self.seed,
            config: CONFIG_FILE.to_string(),
            input_hash: hex(&h.finalize()),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        let path = self.file(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::data(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
        Ok(self.path)
    }
}
