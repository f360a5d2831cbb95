use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{IoError, IoResult};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_file(path: &Path) -> IoResult<[u8; 32]> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IoError::MissingArtifact(path.to_path_buf()),
        _ => IoError::Io(e),
    })?;
    let mut r = BufReader::new(file);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().into())
}

/// `git describe --always --dirty` of the working directory, if available.
pub fn git_describe() -> Option<String> {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
        .filter(|s| !s.is_empty())
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    /// File name relative to the output directory (inputs keep the given path).
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, shown_as: PathBuf) -> IoResult<Self> {
        Ok(Self {
            path: shown_as,
            sha256: hex::encode(sha256_file(path)?),
        })
    }
}

/// Written next to every command's outputs. Contains no timestamps so that
/// reruns reproduce it byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: &'static str,
    pub git: Option<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION"),
            git: git_describe(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> IoResult<()> {
        self.inputs.push(FileDigest::of(path, path.to_path_buf())?);
        Ok(())
    }

    /// Records outputs by name, then writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[&str]) -> IoResult<PathBuf> {
        for name in outputs {
            self.outputs.push(FileDigest::of(&dir.join(name), PathBuf::from(name))?);
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&self).map_err(std::io::Error::other)?;
        std::fs::write(&path, json)?;
        Ok(path)
    }
}
