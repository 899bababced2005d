//! Per-run manifest and the bookkeeping context handed to each command.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, RunConfig};
use crate::error::{Category, CliError, ResultExt};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, as given.
    pub args: Vec<String>,
    pub inputs: Vec<InputRecord>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
    pub config_sha256: String,
    /// Effective configuration as TOML; `config_sha256` is its digest.
    pub config: String,
    pub seed: u64,
    pub deterministic: bool,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub elapsed_seconds: f64,
    pub status: String,
    pub error: Option<CliError>,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub struct RunContext {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub out_dir: PathBuf,
    inputs: Vec<InputRecord>,
    outputs: Vec<String>,
    started_unix: f64,
    clock: Instant,
}

impl RunContext {
    pub fn new(command: &str, args: Vec<String>, config: RunConfig, out_dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&out_dir).context(Category::Io, &format!("creating {}", out_dir.display()))?;
        Ok(Self {
            command: command.into(),
            args,
            config,
            out_dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: unix_now(),
            clock: Instant::now(),
        })
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// RNG for one named purpose; independent streams of the run seed.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }

    /// Records an input file (path and content digest) and returns it.
    pub fn input<'a>(&mut self, path: &'a Path) -> Result<&'a Path, CliError> {
        let bytes = fs::read(path).context(Category::Io, &format!("reading {}", path.display()))?;
        if self.inputs.iter().all(|r| Path::new(&r.path) != path) {
            self.inputs.push(InputRecord {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            });
        }
        Ok(path)
    }

    /// Path of an output file relative to the output directory; parent
    /// directories are created. Refuses to overwrite a recorded input.
    pub fn output(&mut self, relative: &str) -> Result<PathBuf, CliError> {
        let path = self.out_dir.join(relative);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).context(Category::Io, &format!("creating {}", parent.display()))?;
        }
        let clash = self.inputs.iter().any(|r| {
            let a = fs::canonicalize(&r.path).ok();
            a.is_some() && a == fs::canonicalize(&path).ok()
        });
        if clash {
            return Err(CliError::new(
                Category::Usage,
                format!("output {} would overwrite an input", path.display()),
            ));
        }
        self.outputs.push(relative.into());
        Ok(path)
    }

    pub fn finish(self, result: &Result<(), CliError>) -> Result<(), CliError> {
        let config = self.config.serialized();
        let manifest = RunManifest {
            command: self.command,
            args: self.args,
            inputs: self.inputs,
            outputs: self.outputs,
            config_sha256: sha256_hex(config.as_bytes()),
            config,
            seed: self.config.seed,
            deterministic: self.config.deterministic,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix: self.started_unix,
            finished_unix: unix_now(),
            elapsed_seconds: self.clock.elapsed().as_secs_f64(),
            status: if result.is_ok() { "ok" } else { "error" }.into(),
            error: result.as_ref().err().cloned(),
        };
        let path = self.out_dir.join(MANIFEST_NAME);
        vertplan_core::io::write_json(&path, &manifest)?;
        Ok(())
    }
}
