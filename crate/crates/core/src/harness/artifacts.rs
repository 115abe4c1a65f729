use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: String,
    pub seed: u64,
    /// SHA-256 of the resolved config as written to `config.toml`.
    pub config_hash: String,
    pub code_version: String,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    /// `running`, `ok` or `failed`.
    pub status: String,
    pub artifacts: Vec<ArtifactEntry>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory of one run. Every file goes through [`RunDir::file`]
/// so the manifest can list it.
pub struct RunDir {
    root: PathBuf,
    manifest: RunManifest,
    names: Vec<String>,
}

impl RunDir {
    /// Creates the directory, writes the resolved config and an initial
    /// manifest. An existing non-empty directory is refused so that every
    /// file in it belongs to this run.
    pub fn create(cfg: &ExperimentConfig) -> Result<Self> {
        let root = cfg.out_dir.clone();
        if let Ok(mut entries) = fs::read_dir(&root) {
            if entries.next().is_some() {
                return Err(HarnessError::Config(format!(
                    "out_dir {} is not empty",
                    root.display()
                )));
            }
        }
        fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
        let text = cfg.to_toml_string()?;
        let mut run = Self {
            manifest: RunManifest {
                preset: cfg.preset.name().to_string(),
                seed: cfg.seed,
                config_hash: sha256_hex(text.as_bytes()),
                code_version: env!("CARGO_PKG_VERSION").to_string(),
                started_at: unix_now(),
                finished_at: None,
                status: "running".into(),
                artifacts: Vec::new(),
            },
            root,
            names: Vec::new(),
        };
        run.write_text(CONFIG, &text)?;
        run.write_manifest()?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    /// Registers `name` as an artifact and returns its path.
    pub fn file(&mut self, name: &str) -> PathBuf {
        if !self.names.iter().any(|n| n == name) {
            self.names.push(name.to_string());
        }
        self.root.join(name)
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, text).map_err(|e| HarnessError::io(&path, e))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        self.write_text(name, &(text + "\n"))
    }

    pub fn jsonl(&mut self, name: &str) -> Result<JsonlWriter> {
        let path = self.file(name);
        let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(JsonlWriter {
            out: BufWriter::new(f),
            path,
        })
    }

    /// A matrix as CSV (see [`crate::markov::write_matrix_csv`]).
    pub fn write_matrix(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
        let path = self.file(name);
        let f = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        crate::markov::write_matrix_csv(BufWriter::new(f), rows, cols, values)
            .map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.root.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))
    }

    /// Hashes every registered artifact and records the final status.
    pub fn finalize(mut self, ok: bool) -> Result<RunManifest> {
        let mut artifacts = Vec::new();
        for name in &self.names {
            let path = self.root.join(name);
            let bytes = fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
            artifacts.push(ArtifactEntry {
                name: name.clone(),
                sha256: sha256_hex(&bytes),
            });
        }
        artifacts.sort_by(|a, b| a.name.cmp(&b.name));
        self.manifest.artifacts = artifacts;
        self.manifest.finished_at = Some(unix_now());
        self.manifest.status = if ok { "ok" } else { "failed" }.into();
        self.write_manifest()?;
        Ok(self.manifest)
    }
}

pub struct JsonlWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl JsonlWriter {
    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|e| HarnessError::Runtime(e.to_string()))?;
        writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

impl Drop for JsonlWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Reads a JSON-lines file into generic JSON values.
pub fn read_jsonl(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| HarnessError::Runtime(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}
