use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{usage, CliError, CliResult};

pub const MANIFEST_FORMAT: &str = "stab-manifest-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a command and check what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    /// Arguments after the program name, with any config file expanded.
    pub argv: Vec<String>,
    pub params: serde_json::Value,
    pub seeds: Vec<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub tool_version: String,
    pub threads: usize,
    pub wall_clock_ms: u128,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let m: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format != MANIFEST_FORMAT {
            return Err(usage(format!("unsupported manifest format '{}'", m.format)));
        }
        Ok(m)
    }
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> CliResult<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => usage(format!("missing input {}", path.display())),
        _ => CliError::from(e),
    })?;
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
    })
}

/// Write through a sibling temporary file and rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| CliError::from(e.error))?;
    Ok(())
}

/// Inputs read, outputs written and seeds used by one command.
pub struct Run {
    started: Instant,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub seeds: Vec<u64>,
}

impl Run {
    pub fn new() -> Self {
        Self {
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: Vec::new(),
        }
    }

    /// Record an input file; fails with a usage error if it is missing.
    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let d = digest_file(path)?;
        if !self.inputs.contains(&d) {
            self.inputs.push(d);
        }
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        if !self.seeds.contains(&seed) {
            self.seeds.push(seed);
        }
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> CliResult<()> {
        write_atomic(path, bytes)?;
        self.outputs.push(FileDigest {
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn manifest(
        self,
        command: &str,
        argv: &[String],
        params: serde_json::Value,
        threads: usize,
    ) -> RunManifest {
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            command: command.into(),
            argv: argv.to_vec(),
            params,
            seeds: self.seeds,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            threads,
            wall_clock_ms: self.started.elapsed().as_millis(),
        }
    }
}
