//! Atomic output files and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

/// Record of one invocation: enough to rerun it and check its outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_paths: Vec<String>,
    pub seeds: Vec<u64>,
    pub versions: Vec<(String, String)>,
    pub outputs: Vec<OutputEntry>,
}

/// Writes files into one directory and remembers their hashes.
pub struct OutputDir {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    manifest: RunManifest,
}

impl OutputDir {
    pub fn create(dir: &Path, command: &str, args: Vec<String>) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            manifest: RunManifest {
                command: command.to_string(),
                args,
                config_paths: Vec::new(),
                seeds: Vec::new(),
                versions: vec![
                    ("slidewin".into(), slidewin::VERSION.into()),
                    ("slidewin-cli".into(), env!("CARGO_PKG_VERSION").into()),
                ],
                outputs: Vec::new(),
            },
        })
    }

    /// Registers an input file; outputs may never overwrite it.
    pub fn input(&mut self, path: &Path) {
        if let Ok(p) = fs::canonicalize(path) {
            self.inputs.push(p);
        }
    }

    pub fn config(&mut self, path: &Path) {
        self.input(path);
        self.manifest.config_paths.push(path.display().to_string());
    }

    pub fn seed(&mut self, seed: u64) {
        self.manifest.seeds.push(seed);
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `name` inside the output directory.
    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        self.write_at(&path, contents)?;
        Ok(path)
    }

    /// Writes to an explicit path (e.g. `--stats`), hashed like the others.
    pub fn write_at(&mut self, path: &Path, contents: &str) -> Result<(), CliError> {
        self.check_not_input(path)?;
        atomic_write(path, contents.as_bytes())?;
        self.manifest.outputs.push(OutputEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    fn check_not_input(&self, path: &Path) -> Result<(), CliError> {
        if let Ok(p) = fs::canonicalize(path) {
            if self.inputs.contains(&p) {
                return Err(CliError::Input(format!("refusing to overwrite input {}", path.display())));
            }
        }
        Ok(())
    }

    /// Writes `manifest.json` last.
    pub fn finish(mut self) -> Result<RunManifest, CliError> {
        self.manifest.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        let path = self.path("manifest.json");
        self.check_not_input(&path)?;
        atomic_write(&path, text.as_bytes())?;
        Ok(self.manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Temp file in the target directory, then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io_err = |e: std::io::Error| CliError::Input(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}
