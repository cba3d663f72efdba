//! Run manifests: what was run, with which configuration and seed, and what
//! it produced.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use ratingeq::numfmt::to_json_string;
use ratingeq::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Cli, Run};

/// Record written next to the outputs of every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command_line: Vec<String>,
    /// SHA-256 of the canonical configuration.
    pub config_hash: Option<String>,
    /// The configuration in canonical form; feeding it back with the same
    /// seed reproduces the outputs.
    pub config: Option<Value>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub wall_time_seconds: f64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub(crate) fn new(argv: &[OsString], cli: &Cli, run: &Run, wall_time_seconds: f64) -> Self {
        let display = |p: &PathBuf| p.display().to_string();
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command_line: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            config_hash: run.config.as_ref().map(|c| c.hash()),
            config: run.config.as_ref().map(|c| c.canonical_value()),
            seed: cli.seed,
            threads: cli.threads,
            wall_time_seconds,
            inputs: run.inputs.iter().map(display).collect(),
            outputs: run.outputs.iter().map(display).collect(),
        }
    }

    /// Default location: `<first output>.manifest.json`.
    pub fn default_path(first_output: &Path) -> PathBuf {
        let mut name = first_output.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    /// Writes the manifest to `explicit`, or next to the first output. Runs
    /// that only print to standard output have no natural location and are
    /// recorded only when `explicit` is given.
    pub(crate) fn write(&self, explicit: Option<&Path>, outputs: &[PathBuf]) -> Result<Option<PathBuf>> {
        let path = match (explicit, outputs.first()) {
            (Some(p), _) => p.to_path_buf(),
            (None, Some(first)) => Self::default_path(first),
            (None, None) => {
                log::info!("no output files; manifest not written (use --manifest to record it)");
                return Ok(None);
            }
        };
        let text = to_json_string(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
        Ok(Some(path))
    }
}
