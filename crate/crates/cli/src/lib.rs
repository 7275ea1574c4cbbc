//! Experiment runner behind the `ppde` binary.
//!
//! A run reads one JSON config, executes one experiment and writes its
//! artifacts, `schema.json` and `manifest.json` into the output directory.
//! Nothing is written when the config is rejected.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod schema;

use std::path::{Path, PathBuf};

use ppde_lab::LabError;
use serde::Deserialize;
use thiserror::Error;

use config::{ExperimentKind, Loaded};
use experiments::Outcome;
use manifest::{sha256_hex, versions, ArtifactEntry, Manifest, MANIFEST_FILE};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}:{column}: {message}")]
    Schema {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid experiment: {0}")]
    Invalid(LabError),

    #[error("numerical failure: {source}")]
    Numerical {
        source: LabError,
        /// Where the solver diagnostics were written.
        diagnostics: Option<PathBuf>,
    },

    #[error("cannot compare a `{a}` run with a `{b}` run")]
    KindMismatch { a: ExperimentKind, b: ExperimentKind },

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numerical { .. } => EXIT_NUMERICAL,
            CliError::Io { .. } => 1,
            _ => EXIT_CONFIG,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's `output`.
    pub out: Option<PathBuf>,
    /// Overrides the config's `seed`.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

/// Runs the experiment of `kind` described by the config at `config`.
pub fn run(kind: ExperimentKind, config: &Path, opts: &RunOptions) -> Result<RunSummary, CliError> {
    use ExperimentKind::*;
    match kind {
        ExitTime => execute(Loaded::read(config, kind)?, opts, experiments::exit_time),
        Frechet => execute(Loaded::read(config, kind)?, opts, experiments::frechet),
        PriceUvm => execute(Loaded::read(config, kind)?, opts, experiments::price_uvm),
        PerronSweep => execute(Loaded::read(config, kind)?, opts, experiments::perron_sweep),
        ModulusProbe => execute(Loaded::read(config, kind)?, opts, experiments::modulus_probe_run),
        ViscosityAudit => execute(Loaded::read(config, kind)?, opts, experiments::viscosity_audit),
        AssumptionsCheck => execute(Loaded::read(config, kind)?, opts, experiments::assumptions_check),
    }
}

type Experiment<P> = fn(&Loaded<P>, Option<u64>) -> Result<Outcome, CliError>;

fn out_dir<P: for<'de> Deserialize<'de>>(cfg: &Loaded<P>, opts: &RunOptions) -> PathBuf {
    match (&opts.out, &cfg.file.output) {
        (Some(o), _) => o.clone(),
        (None, Some(o)) => cfg.base_dir().join(o),
        (None, None) => cfg.base_dir().join(format!("out-{}", cfg.file.kind)),
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn execute<P: for<'de> Deserialize<'de>>(
    cfg: Loaded<P>,
    opts: &RunOptions,
    f: Experiment<P>,
) -> Result<RunSummary, CliError> {
    let dir = out_dir(&cfg, opts);
    let config_sha256 = sha256_hex(&cfg.bytes);
    let outcome = match f(&cfg, opts.seed) {
        Ok(o) => o,
        Err(CliError::Numerical { source, .. }) => {
            create_dir(&dir)?;
            let path = dir.join(DIAGNOSTICS_FILE);
            let diag = serde_json::json!({
                "kind": cfg.file.kind,
                "config_file": cfg.path.display().to_string(),
                "config_sha256": config_sha256,
                "seed": opts.seed.or(cfg.file.seed),
                "versions": versions(),
                "error": source.to_string(),
                "detail": format!("{source:?}"),
            });
            write(&path, serde_json::to_string_pretty(&diag).expect("JSON values serialize").as_bytes())?;
            return Err(CliError::Numerical {
                source,
                diagnostics: Some(path),
            });
        }
        Err(e) => return Err(e),
    };

    create_dir(&dir)?;
    let mut files = outcome.artifacts;
    let schema = serde_json::to_string_pretty(&schema::schema(cfg.file.kind)).expect("JSON values serialize") + "\n";
    files.push(("schema.json".to_string(), schema));
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let mut artifacts = Vec::with_capacity(files.len());
    for (name, contents) in &files {
        write(&dir.join(name), contents.as_bytes())?;
        artifacts.push(ArtifactEntry {
            file: name.clone(),
            sha256: sha256_hex(contents.as_bytes()),
        });
    }
    let manifest = Manifest {
        kind: cfg.file.kind,
        config_file: cfg.path.display().to_string(),
        config_sha256,
        seed: outcome.seed,
        h: outcome.h,
        versions: versions(),
        artifacts,
        key_outputs: outcome.key_outputs,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(RunSummary { out_dir: dir, manifest })
}

/// A manifest path, or a run directory containing `manifest.json`.
pub fn load_manifest(path: &Path) -> Result<Manifest, CliError> {
    if path.is_dir() {
        Manifest::read(&path.join(MANIFEST_FILE))
    } else {
        Manifest::read(path)
    }
}
