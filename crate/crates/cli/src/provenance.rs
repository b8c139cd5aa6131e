//! `provenance.json`: what a command read and wrote.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
pub struct Provenance {
    command: String,
    argv: Vec<String>,
    version: &'static str,
    seed: Option<u64>,
    threads: usize,
    config: Option<String>,
    inputs: Vec<FileEntry>,
    outputs: Vec<FileEntry>,
}

fn entry(path: &Path) -> std::io::Result<FileEntry> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        bytes += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok(FileEntry {
        path: path.display().to_string(),
        bytes,
        sha256: format!("{:x}", hasher.finalize()),
    })
}

/// Files under `p` (or `p` itself), sorted.
fn expand(p: &Path) -> Vec<PathBuf> {
    if p.is_dir() {
        let mut out = Vec::new();
        if let Ok(rd) = fs::read_dir(p) {
            for e in rd.flatten() {
                out.extend(expand(&e.path()));
            }
        }
        out.sort();
        out
    } else {
        vec![p.to_path_buf()]
    }
}

impl Provenance {
    pub fn new(command: &str, seed: Option<u64>, threads: usize, config: Option<String>) -> Self {
        Provenance {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION"),
            seed,
            threads,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, p: &Path) -> std::io::Result<()> {
        for f in expand(p) {
            self.inputs.push(entry(&f)?);
        }
        Ok(())
    }

    pub fn output(&mut self, p: &Path) -> std::io::Result<()> {
        for f in expand(p) {
            self.outputs.push(entry(&f)?);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_string_pretty(self).expect("plain data"))
    }
}
