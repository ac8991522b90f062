//! Experiment runner: TOML config in, CSV tables and a JSON manifest out.

pub mod config;
mod experiments;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use spde_reflect::noise::SeedManifest;
use spde_reflect::StreamTag;

pub use config::ExperimentConfig;

pub const FORMAT_TAG: &str = "spde-reflect-manifest/1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SPDE_REFLECT_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] spde_reflect::Error),

    #[error("bad manifest: {0}")]
    Manifest(String),

    #[error("{0} replica(s) aborted")]
    ReplicaFailures(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use spde_reflect::Error as E;
        match self {
            CliError::Core(E::BlowUp { .. } | E::NonFinite { .. } | E::OrderingViolated { .. }) => 2,
            CliError::ReplicaFailures(_) => 2,
            _ => 1,
        }
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    KernelCheck,
    Simulate,
    SweepPenalization,
    ObstacleCheck,
    Couple,
    Ergodic,
    StrongFeller,
}

impl Command {
    /// `*-check` subcommands exit with status 3 when a threshold fails.
    pub fn enforces_thresholds(self) -> bool {
        matches!(self, Command::KernelCheck | Command::ObstacleCheck)
    }

    fn streams(self) -> Vec<StreamTag> {
        match self {
            Command::KernelCheck => vec![],
            Command::Simulate | Command::SweepPenalization | Command::ObstacleCheck => vec![StreamTag::W1],
            Command::StrongFeller => vec![StreamTag::W1, StreamTag::W2],
            Command::Couple | Command::Ergodic => StreamTag::ALL.to_vec(),
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Command::KernelCheck => "kernel-check",
            Command::Simulate => "simulate",
            Command::SweepPenalization => "sweep-penalization",
            Command::ObstacleCheck => "obstacle-check",
            Command::Couple => "couple",
            Command::Ergodic => "ergodic",
            Command::StrongFeller => "strong-feller",
        };
        f.write_str(s)
    }
}

/// One thresholded quantity reported by a subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold,
            passed: value <= threshold,
        }
    }

    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            value,
            threshold,
            passed: value >= threshold,
        }
    }

    pub fn flag(name: &str, ok: bool) -> Self {
        Self {
            name: name.to_string(),
            value: ok as u8 as f64,
            threshold: 1.0,
            passed: ok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaFailure {
    pub replica: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub command: Command,
    pub config: ExperimentConfig,
    pub seeds: SeedManifest,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
    pub checks: Vec<Check>,
    pub failed_replicas: Vec<ReplicaFailure>,
    pub error: Option<String>,
    pub exit_code: i32,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| CliError::Manifest(e.to_string()))?;
        if m.format != FORMAT_TAG {
            return Err(CliError::Manifest(format!(
                "format `{}` is not `{FORMAT_TAG}`",
                m.format
            )));
        }
        m.config.validate()?;
        Ok(m)
    }
}

/// Collects CSV tables written into the output directory.
pub(crate) struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub(crate) fn csv<I>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<String>>,
    {
        let path = self.dir.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
        w.write_record(header).map_err(|e| csv_err(&path, e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| csv_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    io_err(path, std::io::Error::other(e))
}

/// Shortest round-trip representation, so reruns reproduce files byte for byte.
pub(crate) fn num(v: f64) -> String {
    format!("{v:e}")
}

/// Subcommand result before it is written to the manifest.
#[derive(Default)]
pub(crate) struct RunSummary {
    pub checks: Vec<Check>,
    pub failed: Vec<ReplicaFailure>,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        self.manifest.exit_code
    }
}

/// Runs `command` with `cfg`, writing tables and `manifest.json` into `out`.
///
/// Configuration errors are returned without touching `out`; everything after validation is
/// recorded in the manifest, including failures.
pub fn execute(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let mut outputs = Outputs::new(out)?;
    let start = Instant::now();
    let result = experiments::run(command, cfg, &mut outputs);
    let wall_clock_seconds = start.elapsed().as_secs_f64();
    let (summary, error, exit_code) = match result {
        Ok(s) => {
            let code = if !s.failed.is_empty() {
                CliError::ReplicaFailures(s.failed.len()).exit_code()
            } else if command.enforces_thresholds() && s.checks.iter().any(|c| !c.passed) {
                3
            } else {
                0
            };
            (s, None, code)
        }
        Err(e) => (RunSummary::default(), Some(e.to_string()), e.exit_code()),
    };
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        command,
        config: cfg.clone(),
        seeds: SeedManifest {
            master_seed: cfg.master_seed,
            replicas: cfg.replicas,
            stream_tags: command.streams(),
        },
        wall_clock_seconds,
        outputs: outputs.files,
        checks: summary.checks,
        failed_replicas: summary.failed,
        error,
        exit_code,
    };
    let manifest_path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Manifest(e.to_string()))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| io_err(&manifest_path, e))?;
    Ok(Outcome {
        manifest,
        manifest_path,
    })
}

/// Reruns the experiment recorded in a manifest.
pub fn replay(manifest: &Path, out: &Path, seed: Option<u64>) -> Result<Outcome, CliError> {
    let m = Manifest::load(manifest)?;
    let mut cfg = m.config;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    execute(m.command, &cfg, out)
}

/// Sets the size of the global rayon pool. Results do not depend on it.
pub fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config {
                field: "threads".into(),
                reason: e.to_string(),
            })?;
    }
    Ok(())
}
