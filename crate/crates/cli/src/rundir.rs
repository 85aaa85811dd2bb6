//! Run directory layout, manifest and log.
//!
//! ```text
//! <run_dir>/<run_name>/
//!   manifest.json   one entry per stage: config, input and output digests
//!   manifests/      per-sample region manifests and crops
//!   records/        JSONL record files
//!   reports/        scores, tables, statistics
//!   log/            timestamped log; the only non-reproducible part
//! ```

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use triad_core::config::RunConfig;
use triad_core::map_io::{read_json, write_json};
use triad_core::{Error, Result};

pub const SUBDIRS: [&str; 4] = ["manifests", "records", "reports", "log"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub config: RunConfig,
    pub args: BTreeMap<String, String>,
    /// sha256 of each input file, keyed by the path as given.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of each output, keyed by path relative to the run root.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageEntry>,
}

pub struct RunDir {
    root: PathBuf,
    stage: String,
    config: RunConfig,
    args: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunDir {
    pub fn create(config: &RunConfig, stage: &str) -> Result<Self> {
        let root = config.run_root();
        for sub in SUBDIRS {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir, source: e })?;
        }
        let dir = Self {
            root,
            stage: stage.to_string(),
            config: config.clone(),
            args: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        dir.log(&format!("start {stage}"))?;
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    pub fn arg(&mut self, key: &str, value: impl ToString) {
        self.args.insert(key.to_string(), value.to_string());
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Records an output already written under the run root.
    pub fn output(&mut self, relative: &str) -> Result<()> {
        let digest = sha256_file(&self.path(relative))?;
        self.outputs.insert(relative.to_string(), digest);
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, relative: &str, value: &T) -> Result<()> {
        write_json(value, &self.path(relative))?;
        self.output(relative)
    }

    pub fn write_text(&mut self, relative: &str, text: &str) -> Result<()> {
        let path = self.path(relative);
        fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
        self.output(relative)
    }

    pub fn log(&self, message: &str) -> Result<()> {
        let path = self.root.join("log").join("triad.log");
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::Io { path: path.clone(), source: e })?;
        writeln!(f, "{} [{}] {message}", unix_now(), self.stage).map_err(|e| Error::Io { path, source: e })
    }

    /// Merges this stage into `manifest.json`.
    pub fn finish(self) -> Result<PathBuf> {
        let path = self.root.join("manifest.json");
        let mut manifest: RunManifest = if path.exists() { read_json(&path)? } else { RunManifest::default() };
        manifest.stages.insert(
            self.stage.clone(),
            StageEntry {
                config: self.config.clone(),
                args: self.args.clone(),
                inputs: self.inputs.clone(),
                outputs: self.outputs.clone(),
            },
        );
        write_json(&manifest, &path)?;
        self.log(&format!("done, {} outputs", self.outputs.len()))?;
        Ok(path)
    }
}
