//! Experiment orchestration behind the command-line interface.

mod commands;
pub mod config;
pub mod validate;

pub use commands::*;
pub use config::{ExperimentConfig, Profile};
pub use validate::{run_validation, Check, ValidateOptions, ValidationReport};

use crate::error::{Error, Result};
use crate::rng::derive_seed;

pub const THREADS_ENV: &str = "RDOPT_THREADS";

/// Caps the global worker pool at `RDOPT_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub fn cmd_validate(cfg: &ExperimentConfig, corrupt_delta: Option<f64>) -> Result<ValidationReport> {
    let opts = ValidateOptions {
        trials: cfg.mc_trials,
        corrupt_delta,
        seed: derive_seed(cfg.seed, config::seeds::VALIDATE),
        ..ValidateOptions::default()
    };
    run_validation(&cfg.system_config(), &opts)
}
