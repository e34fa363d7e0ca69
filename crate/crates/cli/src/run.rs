//! Run directories: outputs, the resolved config and a result JSON that
//! names every input by checksum.

use crate::config::Config;
use crate::error::{CliError, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// SHA-256 of a file, or of a directory's files taken in sorted relative-path
/// order (each contributes its path and its bytes).
pub fn checksum(path: &Path) -> Result<String> {
    let meta = std::fs::metadata(path).map_err(CliError::io(path))?;
    let mut h = Sha256::new();
    if meta.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        for rel in files {
            let bytes = std::fs::read(path.join(&rel)).map_err(CliError::io(path.join(&rel)))?;
            h.update(rel.as_bytes());
            h.update([0]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(&bytes);
        }
    } else {
        h.update(std::fs::read(path).map_err(CliError::io(path))?);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(CliError::io(dir))? {
        let entry = entry.map_err(CliError::io(dir))?;
        let p = entry.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root");
            out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
        }
    }
    Ok(())
}

pub struct RunDir {
    pub path: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
}

impl RunDir {
    /// Creates the directory and records the resolved config as an input.
    pub fn create(path: &Path, config: &Config) -> Result<Self> {
        std::fs::create_dir_all(path).map_err(CliError::io(path))?;
        let text = config.to_json();
        let mut run = Self {
            path: path.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        };
        run.write("config.json", text.as_bytes())?;
        run.inputs.insert("config".into(), hex::encode(Sha256::digest(text.as_bytes())));
        Ok(run)
    }

    /// Records an input file or directory under `role`.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let sum = checksum(path)?;
        self.inputs.insert(role.into(), sum);
        Ok(())
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Notes an output written by other means.
    pub fn output(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.into());
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, bytes).map_err(CliError::io(&p))?;
        self.output(name);
        Ok(())
    }

    /// Writes `result.json` and returns its bytes.
    pub fn finish(mut self, command: &str, result: &impl Serialize) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Envelope<'a, T> {
            command: &'a str,
            inputs: &'a BTreeMap<String, String>,
            outputs: &'a [String],
            result: &'a T,
        }
        self.outputs.sort();
        let env = Envelope {
            command,
            inputs: &self.inputs,
            outputs: &self.outputs,
            result,
        };
        let mut bytes = serde_json::to_vec_pretty(&env).expect("serializable");
        bytes.push(b'\n');
        let p = self.file("result.json");
        std::fs::write(&p, &bytes).map_err(CliError::io(&p))?;
        Ok(bytes)
    }
}
