//! Command-line workflows around `harmonize-core`: phantom cohorts, fold
//! splits, training, translation, evaluation and fold-level reports.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod folds;
pub mod seeds;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};

/// Runs `f` on a rayon pool with `workers` threads (0 = all cores).
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}
