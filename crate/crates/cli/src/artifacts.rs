use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timestamps {
    pub started_unix: u64,
    pub finished_unix: u64,
    /// `SOURCE_DATE_EPOCH` when that variable is set, `clock` otherwise.
    pub source: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub parameters: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timestamps: Timestamps,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> (u64, &'static str) {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return (epoch, "SOURCE_DATE_EPOCH");
    }
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    (secs, "clock")
}

/// Reads an input file, remembering its digest for the manifest.
pub struct Inputs {
    digests: Vec<FileDigest>,
}

impl Inputs {
    pub fn new() -> Self {
        Inputs { digests: Vec::new() }
    }

    pub fn read(&mut self, path: &Path) -> CliResult<String> {
        let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.digests.push(FileDigest { name, sha256: sha256_hex(&bytes) });
        String::from_utf8(bytes).map_err(|_| CliError::Usage(format!("{} is not UTF-8 text", path.display())))
    }

    pub fn json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> CliResult<T> {
        let text = self.read(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("cannot parse {}: {e}", path.display())))
    }
}

/// Write-once output directory. Each file is written to a temporary name and
/// renamed into place.
pub struct Artifacts {
    dir: PathBuf,
    command: String,
    started: u64,
    outputs: Vec<FileDigest>,
}

impl Artifacts {
    pub fn create(dir: &Path, command: &str) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Artifacts { dir: dir.to_path_buf(), command: command.to_string(), started: now().0, outputs: Vec::new() })
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let target = self.dir.join(name);
        let io = |e: std::io::Error| CliError::Domain(format!("cannot write {}: {e}", target.display()));
        fs::write(&tmp, bytes).map_err(io)?;
        fs::rename(&tmp, &target).map_err(io)?;
        self.outputs.push(FileDigest { name: name.to_string(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Domain(e.to_string()))?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn finish(mut self, inputs: Inputs, parameters: serde_json::Value, seed: Option<u64>) -> CliResult<()> {
        let (finished, source) = now();
        let manifest = RunManifest {
            tool: "measure-mdp",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            parameters,
            seed,
            inputs: inputs.digests,
            outputs: std::mem::take(&mut self.outputs),
            timestamps: Timestamps { started_unix: self.started.min(finished), finished_unix: finished, source },
        };
        self.write_json("manifest.json", &manifest)
    }
}
