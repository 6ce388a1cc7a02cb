//! Run manifests, content digests and the run-directory lock.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::error::{CliError, Result};

pub const LOCK_FILE: &str = ".latefuse.lock";
pub const RUNS_DIR: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: digest_path(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub branch: Option<String>,
    pub created_at: String,
    pub config_digest: String,
    pub seed: u64,
    pub versions: Vec<(String, String)>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// The resolved configuration the digest was taken over.
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(command: &str, branch: Option<&str>, cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            branch: branch.map(str::to_string),
            created_at: Utc::now().to_rfc3339(),
            config_digest: cfg.digest()?,
            seed,
            versions: vec![
                ("latefuse-cli".into(), env!("CARGO_PKG_VERSION").into()),
                ("format".into(), "1".into()),
            ],
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: cfg.clone(),
        })
    }

    pub fn file_name(command: &str, branch: Option<&str>) -> String {
        match branch {
            Some(b) => format!("{command}-{b}.json"),
            None => format!("{command}.json"),
        }
    }

    pub fn path(output_dir: &Path, command: &str, branch: Option<&str>) -> PathBuf {
        output_dir.join(RUNS_DIR).join(Self::file_name(command, branch))
    }

    pub fn write(&self, output_dir: &Path) -> Result<PathBuf> {
        let path = Self::path(output_dir, &self.command, self.branch.as_deref());
        fs::create_dir_all(path.parent().expect("has parent"))?;
        fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// SHA-256 of a file, or of the sorted `(relative path, digest)` list of a
/// directory tree.
pub fn digest_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut h = Sha256::new();
        for rel in files {
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(digest_path(&path.join(&rel))?.as_bytes());
            h.update([b'\n']);
        }
        Ok(hex(&h.finalize()))
    } else {
        let mut f = fs::File::open(path).map_err(|e| CliError::MissingInputs(vec![format!("{}: {e}", path.display())]))?;
        let mut h = Sha256::new();
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
        Ok(hex(&h.finalize()))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(output_dir: &Path) -> Result<Self> {
        fs::create_dir_all(output_dir)?;
        let path = output_dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
