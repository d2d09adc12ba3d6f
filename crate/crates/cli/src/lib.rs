//! Config-driven experiment runner on top of `ntk-lab-core`.
//!
//! A run reads one JSON config, expands its grid, writes plot-ready CSV and
//! JSON into an output directory, and finishes with `manifest.json` listing
//! every file with its size and SHA-256.

pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod manifest;
pub mod presets;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use ntk_lab_core::io::write_json;

use crate::config::{kind_name, parse_config, ExperimentConfig};
use crate::error::CliError;
use crate::manifest::{list_files, sha256_hex, RunManifest, MANIFEST_NAME};

pub const SEED_ENV: &str = "NTK_LAB_SEED";

pub const SCHEMA: &str = include_str!("../schema/config.schema.json");

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    /// Worker threads for grid cells; `None` uses every core.
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
}

/// Seed override from `NTK_LAB_SEED`, if set.
pub fn seed_from_env() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::schema("seed", format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Clear a previous run in `out`, refusing to touch a directory that holds
/// anything else.
fn prepare_out_dir(out: &Path) -> Result<(), CliError> {
    if out.exists() {
        let empty = std::fs::read_dir(out)?.next().is_none();
        if !empty {
            if !out.join(MANIFEST_NAME).exists() {
                return Err(CliError::io(format!(
                    "{} is not empty and holds no previous run",
                    out.display()
                )));
            }
            std::fs::remove_dir_all(out)?;
        }
    }
    std::fs::create_dir_all(out)?;
    Ok(())
}

/// Where a run writes when `--out` is not given.
pub fn default_out_dir(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    match &cfg.output_dir {
        Some(d) => PathBuf::from(d),
        None => Path::new("runs").join(name),
    }
}

/// Parse, validate and run a config. `base_dir` anchors relative data paths;
/// `name` picks the default output directory.
pub fn run_config_text(text: &str, base_dir: &Path, name: &str, opts: &RunOptions) -> Result<(PathBuf, RunManifest), CliError> {
    let mut cfg = parse_config(text)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    let out = opts.out.clone().unwrap_or_else(|| default_out_dir(&cfg, name));
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let resolved = serde_json::to_vec(&cfg).expect("config serializes");
    let config_hash = sha256_hex(&resolved);

    prepare_out_dir(&out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::io(format!("worker pool: {e}")))?;
    pool.install(|| experiments::run(&cfg, &out, base_dir))?;

    let manifest = RunManifest {
        run_id: format!("{}-{started_unix}", &config_hash[..12]),
        kind: kind_name(cfg.kind).to_string(),
        config_hash,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        files: list_files(&out)?,
    };
    write_json(&out.join(MANIFEST_NAME), &manifest)?;
    Ok((out, manifest))
}

pub fn run_preset(name: &str, opts: &RunOptions) -> Result<(PathBuf, RunManifest), CliError> {
    let text = presets::preset(name).ok_or_else(|| {
        CliError::schema(
            "preset",
            format!("unknown preset {name:?}; available: {}", presets::names().join(", ")),
        )
    })?;
    run_config_text(text, Path::new("."), name, opts)
}

pub fn run_config_file(path: &Path, opts: &RunOptions) -> Result<(PathBuf, RunManifest), CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    run_config_text(&text, &base, &name, opts)
}
