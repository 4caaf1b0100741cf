//! Write-once run directories named by a hash of command, config and inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use peghole::dataset::hash_bytes;

use crate::config::RunConfig;

/// Error carrying a machine-readable kind and the offending path.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
    pub path: Option<PathBuf>,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.path {
            Some(p) => write!(f, "{}: {}", p.display(), self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for Failure {}

pub fn fail(kind: &'static str, message: impl Into<String>, path: Option<&Path>) -> anyhow::Error {
    Failure {
        kind,
        message: message.into(),
        path: path.map(Path::to_path_buf),
    }
    .into()
}

pub fn read_input(path: &Path) -> anyhow::Result<Vec<u8>> {
    fs::read(path).map_err(|e| fail("missing_input", e.to_string(), Some(path)))
}

/// Parses an input, blaming `path` on failure.
pub fn parse_input<T>(path: &Path, f: impl FnOnce(&[u8]) -> peghole::Result<T>) -> anyhow::Result<T> {
    let bytes = read_input(path)?;
    f(&bytes).map_err(|e| fail("invalid_input", e.to_string(), Some(path)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub key: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub dataset_hash: Option<String>,
    pub paired_hash: Option<String>,
}

pub struct Run {
    dir: PathBuf,
    tmp: PathBuf,
    meta: RunMeta,
}

impl Run {
    pub fn begin(out_root: &Path, command: &str, cfg: &RunConfig, inputs: &[(&str, &Path)]) -> anyhow::Result<Self> {
        let mut hashes = BTreeMap::new();
        for (name, path) in inputs {
            hashes.insert(name.to_string(), hash_bytes(&read_input(path)?));
        }
        let key_doc = json!({ "command": command, "config": cfg, "inputs": hashes });
        let key = hash_bytes(serde_json::to_string(&key_doc)?.as_bytes());
        let dir = out_root.join(format!("{command}-{}", &key[..16]));
        if dir.exists() {
            return Err(fail("run_exists", "run directory already exists; outputs are write-once", Some(&dir)));
        }
        let tmp = out_root.join(format!(".{command}-{}.partial-{}", &key[..16], std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp).map_err(|e| fail("io", e.to_string(), Some(&tmp)))?;
        let mut run = Self {
            dir,
            tmp,
            meta: RunMeta {
                command: command.to_string(),
                key,
                inputs: hashes,
                outputs: BTreeMap::new(),
                dataset_hash: None,
                paired_hash: None,
            },
        };
        let mut snapshot = serde_json::to_vec_pretty(cfg)?;
        snapshot.push(b'\n');
        run.write("config.json", &snapshot)?;
        Ok(run)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let path = self.tmp.join(name);
        fs::write(&path, bytes).map_err(|e| fail("io", e.to_string(), Some(&path)))?;
        self.meta.outputs.insert(name.to_string(), hash_bytes(bytes));
        Ok(())
    }

    pub fn write_with(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> peghole::Result<()>) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        {
            let mut w = BufWriter::new(&mut buf);
            f(&mut w)?;
            w.flush()?;
        }
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn set_hashes(&mut self, dataset: Option<String>, paired: Option<String>) {
        self.meta.dataset_hash = dataset;
        self.meta.paired_hash = paired;
    }

    /// Writes `run.json`, moves the directory into place and returns it.
    pub fn finish(mut self) -> anyhow::Result<(PathBuf, RunMeta)> {
        let meta = self.meta.clone();
        self.write_json("run.json", &meta)?;
        if self.dir.exists() {
            let _ = fs::remove_dir_all(&self.tmp);
            return Err(fail("run_exists", "run directory appeared while running", Some(&self.dir)));
        }
        fs::rename(&self.tmp, &self.dir).map_err(|e| fail("io", e.to_string(), Some(&self.dir)))?;
        Ok((self.dir.clone(), meta))
    }
}

impl Drop for Run {
    fn drop(&mut self) {
        if self.tmp.exists() {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

pub fn load_meta(dir: &Path) -> anyhow::Result<RunMeta> {
    let path = dir.join("run.json");
    let bytes = read_input(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| fail("invalid_input", e.to_string(), Some(&path)))
}
