//! Run directories and their records.
//!
//! Every command writes into `runs/<hash>/<command>[/<variant>]`. Output is
//! staged in a sibling `.partial` directory and renamed into place only after
//! the command succeeds, so an existing step directory is always complete and
//! is never written to again.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const RECORD_FILE: &str = "record.json";
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub variant: Option<String>,
    pub config_hash: String,
    pub tool_version: String,
    /// Upstream artifacts, relative to the run root.
    pub inputs: Vec<String>,
    /// Files written by this step, relative to the step directory.
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
    pub wall_clock_s: f64,
}

/// Root of all steps for one configuration.
#[derive(Clone, Debug)]
pub struct RunRoot {
    pub dir: PathBuf,
    pub hash: String,
}

impl RunRoot {
    /// Creates `output_dir/<hash>/` with a frozen config echo, or checks the echo of an existing one.
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let hash = cfg.hash();
        let dir = cfg.output_dir.join(&hash);
        fs::create_dir_all(&dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        let echo = dir.join(CONFIG_ECHO);
        if echo.exists() {
            let existing = ExperimentConfig::load(&echo)?;
            if existing.hash() != hash {
                return Err(Error::Invariant(format!("{} does not match the config hash {hash}", echo.display())));
            }
        } else {
            let frozen = ExperimentConfig { output_dir: PathBuf::from("."), ..cfg.clone() };
            fs::write(&echo, frozen.to_toml())?;
        }
        Ok(Self { dir, hash })
    }

    pub fn step_path(&self, command: &str, variant: Option<&str>) -> PathBuf {
        let base = self.dir.join(command);
        match variant {
            Some(v) => base.join(v),
            None => base,
        }
    }

    /// Path of a finished artifact, or an error naming the command that produces it.
    pub fn require(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p.display().to_string(), producer: producer.to_string() })
        }
    }

    pub fn is_complete(&self, command: &str, variant: Option<&str>) -> bool {
        self.step_path(command, variant).join(RECORD_FILE).exists()
    }

    pub fn read_record(&self, command: &str, variant: Option<&str>) -> Result<RunRecord> {
        let p = self.step_path(command, variant).join(RECORD_FILE);
        let bytes = fs::read(&p).map_err(|_| Error::MissingArtifact { path: p.display().to_string(), producer: command.to_string() })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Starts a new step; fails if a finished step already exists at that location.
    pub fn begin(&self, command: &str, variant: Option<&str>) -> Result<Step> {
        let final_dir = self.step_path(command, variant);
        if final_dir.exists() {
            return Err(Error::RunExists(final_dir.display().to_string()));
        }
        let staging = partial_path(&final_dir);
        if staging.exists() {
            // Left behind by an interrupted attempt; it was never published.
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::Io(format!("{}: {e}", staging.display())))?;
        log::info!("{command}{}: writing {}", variant.map(|v| format!(" [{v}]")).unwrap_or_default(), final_dir.display());
        Ok(Step {
            command: command.to_string(),
            variant: variant.map(str::to_string),
            hash: self.hash.clone(),
            staging,
            final_dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }
}

fn partial_path(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

/// A step being written. Nothing is visible at the final path until [`Step::finish`].
#[derive(Debug)]
pub struct Step {
    pub command: String,
    pub variant: Option<String>,
    hash: String,
    staging: PathBuf,
    final_dir: PathBuf,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl Step {
    /// Staging location of an output file; the name is recorded in the run record.
    pub fn path(&mut self, rel: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == rel) {
            self.outputs.push(rel.to_string());
        }
        let p = self.staging.join(rel);
        if let Some(parent) = p.parent() {
            let _ = fs::create_dir_all(parent);
        }
        p
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel);
        fs::write(&p, bytes).map_err(|e| Error::Io(format!("{}: {e}", p.display())))
    }

    pub fn input(&mut self, rel: impl Into<String>) {
        self.inputs.push(rel.into());
    }

    pub fn final_dir(&self) -> &Path {
        &self.final_dir
    }

    pub fn finish(mut self, summary: serde_json::Value) -> Result<RunRecord> {
        self.outputs.sort();
        let record = RunRecord {
            command: self.command.clone(),
            variant: self.variant.clone(),
            config_hash: self.hash.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            summary,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        };
        fs::write(self.staging.join(RECORD_FILE), serde_json::to_vec_pretty(&record)?)?;
        if self.final_dir.exists() {
            return Err(Error::RunExists(self.final_dir.display().to_string()));
        }
        fs::rename(&self.staging, &self.final_dir)?;
        Ok(record)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dir: &Path) -> ExperimentConfig {
        ExperimentConfig { output_dir: dir.to_path_buf(), ..Default::default() }
    }

    #[test]
    fn step_publishes_on_finish_and_refuses_reuse() {
        let tmp = tempfile::tempdir().unwrap();
        let root = RunRoot::open(&cfg(tmp.path())).unwrap();
        assert!(root.dir.join(CONFIG_ECHO).exists());
        let mut step = root.begin("evaluate", Some("v1")).unwrap();
        step.write("metrics.jsonl", "{}\n").unwrap();
        assert!(!root.step_path("evaluate", Some("v1")).exists());
        let rec = step.finish(serde_json::json!({"f1": 1.0})).unwrap();
        assert_eq!(rec.outputs, vec!["metrics.jsonl".to_string()]);
        assert!(root.is_complete("evaluate", Some("v1")));
        assert_eq!(root.read_record("evaluate", Some("v1")).unwrap(), rec);
        assert!(matches!(root.begin("evaluate", Some("v1")), Err(Error::RunExists(_))));
        // Reopening the same config keeps the echo.
        RunRoot::open(&cfg(tmp.path())).unwrap();
    }

    #[test]
    fn abandoned_staging_is_discarded() {
        let tmp = tempfile::tempdir().unwrap();
        let root = RunRoot::open(&cfg(tmp.path())).unwrap();
        let mut step = root.begin("gen-data", None).unwrap();
        step.write("x", "partial").unwrap();
        drop(step);
        let step = root.begin("gen-data", None).unwrap();
        step.finish(serde_json::Value::Null).unwrap();
        let rec = root.read_record("gen-data", None).unwrap();
        assert!(rec.outputs.is_empty());
    }

    #[test]
    fn missing_artifact_names_its_producer() {
        let tmp = tempfile::tempdir().unwrap();
        let root = RunRoot::open(&cfg(tmp.path())).unwrap();
        let err = root.require("gen-data/backbone.ckpt", "gen-data").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("backbone.ckpt") && msg.contains("dcppd gen-data"), "{msg}");
    }
}
