//! Per-command manifests: what ran, with which seeds and configuration, and
//! the SHA-256 of every file read or written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_VERSION: u32 = 1;

/// Fields that legitimately differ between otherwise identical runs.
pub const VOLATILE_FIELDS: &[&str] = &["created_unix", "elapsed_secs"];

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub root: u64,
    pub synth: u64,
    pub split: u64,
    pub model: u64,
    pub train: u64,
}

#[derive(Debug, Serialize)]
pub struct Formats {
    pub synth_templates: u32,
    pub checkpoint: u32,
    pub report: u32,
    pub analysis: u32,
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: u32,
    pub tool: &'static str,
    pub tool_version: &'static str,
    pub command: String,
    pub args: Vec<String>,
    pub seeds: Seeds,
    pub formats: Formats,
    pub config: ExperimentConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub notes: BTreeMap<String, serde_json::Value>,
    pub created_unix: u64,
    pub elapsed_secs: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", Sha256::digest(bytes)))
}

/// Collects file hashes while a command runs.
pub struct Recorder {
    out_dir: PathBuf,
    command: String,
    args: Vec<String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    notes: BTreeMap<String, serde_json::Value>,
    started: Instant,
}

impl Recorder {
    pub fn new(out_dir: &Path, command: &str, args: Vec<String>) -> Self {
        Recorder {
            out_dir: out_dir.to_path_buf(),
            command: command.to_owned(),
            args,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    /// Paths inside the output directory are recorded relative to it.
    fn key(&self, path: &Path) -> String {
        path.strip_prefix(&self.out_dir)
            .unwrap_or(path)
            .display()
            .to_string()
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.inputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let h = sha256_file(path)?;
        self.outputs.insert(self.key(path), h);
        Ok(())
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.notes
            .insert(key.to_owned(), serde_json::to_value(value).expect("note serializes"));
    }

    pub fn finish(self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            tool: "turnshift",
            tool_version: env!("CARGO_PKG_VERSION"),
            command: self.command.clone(),
            args: self.args,
            seeds: Seeds {
                root: cfg.seed,
                synth: cfg.synth.seed,
                split: cfg.split_seed,
                model: cfg.model.seed,
                train: cfg.train.seed,
            },
            formats: Formats {
                synth_templates: turnshift::corpus::SYNTH_TEMPLATE_VERSION,
                checkpoint: turnshift::model::CHECKPOINT_VERSION,
                report: turnshift::evaluation::REPORT_VERSION,
                analysis: turnshift::analysis::ANALYSIS_VERSION,
            },
            config: cfg.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            notes: self.notes,
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            elapsed_secs: self.started.elapsed().as_secs_f64(),
        };
        let path = self.out_dir.join(format!("manifest-{}.json", self.command));
        let text = serde_json::to_string_pretty(&manifest)? + "\n";
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

/// A manifest as JSON with the volatile fields removed.
pub fn stable_view(text: &str) -> Result<serde_json::Value> {
    let mut v: serde_json::Value = serde_json::from_str(text)?;
    if let Some(obj) = v.as_object_mut() {
        for f in VOLATILE_FIELDS {
            obj.remove(*f);
        }
    }
    Ok(v)
}
