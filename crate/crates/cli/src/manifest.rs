//! Run manifests and the output directory they describe.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub config_sha256: String,
    pub seed: u64,
    pub git: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub wall_clock_secs: f64,
    pub outputs: Vec<OutputDigest>,
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// The only place a command writes to. Every file goes through [`Outputs::write`]
/// so that the manifest can list it.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Writes `name` (a plain file name) inside the output directory.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<()> {
        assert!(
            !name.contains('/') && !name.contains('\\') && name != MANIFEST_FILE,
            "output names are plain file names"
        );
        std::fs::write(self.dir.join(name), bytes)?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn digests(&self) -> Vec<OutputDigest> {
        self.files
            .iter()
            .filter_map(|name| {
                let bytes = std::fs::read(self.dir.join(name)).ok()?;
                Some(OutputDigest {
                    path: name.clone(),
                    sha256: sha256_hex(&bytes),
                    bytes: bytes.len() as u64,
                })
            })
            .collect()
    }
}

/// Times a command and writes its manifest, also when the command fails.
pub struct Recorder {
    command: String,
    seed: u64,
    started: f64,
    clock: std::time::Instant,
}

impl Recorder {
    pub fn start(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            seed,
            started: unix_now(),
            clock: std::time::Instant::now(),
        }
    }

    pub fn finish(self, out: &Outputs, config: Value, error: Option<String>) -> std::io::Result<RunManifest> {
        let canonical = serde_json::to_vec(&config).map_err(std::io::Error::other)?;
        let manifest = RunManifest {
            command: self.command,
            config_sha256: sha256_hex(&canonical),
            config,
            seed: self.seed,
            git: git_describe(),
            started_unix: self.started,
            finished_unix: unix_now(),
            wall_clock_secs: self.clock.elapsed().as_secs_f64(),
            outputs: out.digests(),
            error,
        };
        let mut s = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::other)?;
        s.push('\n');
        std::fs::write(out.dir().join(MANIFEST_FILE), s)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn manifest_lists_outputs_even_on_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::create(dir.path()).unwrap();
        out.write("a.csv", b"x\n").unwrap();
        out.write("a.csv", b"y\n").unwrap();
        let m = Recorder::start("demo", 3)
            .finish(&out, serde_json::json!({"k": 1}), Some("boom".into()))
            .unwrap();
        assert_eq!(m.outputs.len(), 1);
        assert_eq!(m.outputs[0].sha256, sha256_hex(b"y\n"));
        assert_eq!(m.error.as_deref(), Some("boom"));
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
