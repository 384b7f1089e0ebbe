//! One JSON record per mutating command or request.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use wspace_core::config::Config;
use wspace_core::util::sha256_hex;
use wspace_core::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config: Config,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix_ms: u128,
    pub elapsed_ms: u128,
}

/// Collects hashes while a command runs; [`Recorder::finish`] writes it.
pub struct Recorder {
    manifest: RunManifest,
    start: Instant,
}

impl Recorder {
    pub fn start(command: &str, config: &Config) -> Self {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis());
        Recorder {
            manifest: RunManifest {
                run_id: uuid::Uuid::new_v4().to_string(),
                command: command.into(),
                config: config.clone(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix_ms: started,
                elapsed_ms: 0,
            },
            start: Instant::now(),
        }
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn input(&mut self, name: impl Into<String>, hash: impl Into<String>) {
        self.manifest.inputs.insert(name.into(), hash.into());
    }

    pub fn output(&mut self, name: impl Into<String>, hash: impl Into<String>) {
        self.manifest.outputs.insert(name.into(), hash.into());
    }

    pub fn input_file(&mut self, name: impl Into<String>, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.input(name, sha256_hex(&bytes));
        Ok(())
    }

    pub fn output_file(&mut self, name: impl Into<String>, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.output(name, sha256_hex(&bytes));
        Ok(())
    }

    /// Writes `<runs_dir>/<run_id>.json` and returns its path.
    pub fn finish(mut self, runs_dir: &Path) -> Result<PathBuf> {
        self.manifest.elapsed_ms = self.start.elapsed().as_millis();
        std::fs::create_dir_all(runs_dir).map_err(|e| Error::io(runs_dir, e))?;
        let path = runs_dir.join(format!("{}.json", self.manifest.run_id));
        std::fs::write(&path, serde_json::to_vec_pretty(&self.manifest)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
