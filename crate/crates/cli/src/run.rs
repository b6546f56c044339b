//! Run directories and their manifests.
//!
//! A run directory lives under `$ESPLIT_RUN_ROOT` (default `runs`). Each
//! command writes its outputs there and records a [`RunManifest`] listing the
//! SHA-256 of every file it read and wrote, together with the effective
//! configuration, so the command can be replayed from the manifest alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use esplit_core::layers::Checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::command::Command;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const RUN_ROOT_ENV: &str = "ESPLIT_RUN_ROOT";
pub const MANIFEST_SCHEMA: &str = "esplit.manifest.v1";

pub fn run_root() -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool_version: String,
    pub command: Command,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Files read but not produced by this command: run-relative names, or
    /// absolute paths for files outside the run directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

impl RunManifest {
    pub fn file_name(command: &Command) -> String {
        format!("manifest-{}.json", command.name())
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::InvalidInput(format!("{}: {e}", path.display())))?;
        if m.schema != MANIFEST_SCHEMA {
            return Err(CliError::InvalidInput(format!("{}: schema {:?}, expected {MANIFEST_SCHEMA}", path.display(), m.schema)));
        }
        Ok(m)
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// One command executing inside a run directory.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    started: u64,
}

impl Run {
    pub fn open(dir: PathBuf, cfg: ExperimentConfig) -> CliResult<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::Internal(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir, cfg, inputs: BTreeMap::new(), outputs: BTreeMap::new(), started: now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn outputs(&self) -> &BTreeMap<String, String> {
        &self.outputs
    }

    /// Reads a run file, recording it as an input unless this run wrote it.
    pub fn read(&mut self, name: &str) -> CliResult<Vec<u8>> {
        let path = self.path(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        if !self.outputs.contains_key(name) {
            self.inputs.insert(name.to_string(), sha256_hex(&bytes));
        }
        Ok(bytes)
    }

    /// Records a file outside the run directory as an input.
    pub fn note_external(&mut self, path: &Path) -> CliResult<()> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let abs = std::fs::canonicalize(path).unwrap_or_else(|_| path.to_path_buf());
        self.inputs.insert(abs.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.path(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn load_checkpoint(&mut self, name: &str) -> CliResult<Checkpoint> {
        let bytes = self.read(name)?;
        Checkpoint::from_bytes(&bytes).map_err(|e| CliError::InvalidInput(format!("{name}: {e}")))
    }

    pub fn save_checkpoint(&mut self, name: &str, ckpt: &Checkpoint) -> CliResult<String> {
        let bytes = ckpt.to_bytes();
        self.write(name, &bytes)?;
        Ok(sha256_hex(&bytes))
    }

    /// Writes the manifest for `command` and returns it.
    pub fn finish(self, command: &Command) -> CliResult<RunManifest> {
        let m = RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.clone(),
            seed: self.cfg.seed,
            config: self.cfg.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_s: self.started,
            finished_unix_s: now(),
        };
        let path = self.dir.join(RunManifest::file_name(command));
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
        Ok(m)
    }
}
