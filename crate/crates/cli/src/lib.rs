//! Configuration loading, experiment orchestration and verdict reporting
//! for the `trajent` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod pipeline;
pub mod verdict;

use std::path::{Path, PathBuf};

pub use config::{ConfigError, Experiment, ExperimentConfig, LoadedConfig};
pub use pipeline::{run_experiment, Command, RunError};
pub use verdict::{Check, Status, Verdict};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

pub const DEFAULT_OUT_DIR: &str = "trajent-out";

/// Loads `config`, runs `command` and prints the verdict table; returns the
/// process exit code.
pub fn execute(command: Command, config: &Path, out: Option<&Path>, seed: Option<u64>) -> u8 {
    let loaded = match LoadedConfig::from_path(config) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("{}: {e}", config.display());
            return EXIT_CONFIG;
        }
    };
    let mut exp = match loaded.build() {
        Ok(x) => x,
        Err(e) => {
            eprintln!("{}: {e}", config.display());
            return EXIT_CONFIG;
        }
    };
    if let Some(seed) = seed {
        exp = exp.with_seed(seed);
    }
    let out: PathBuf = out
        .map(Path::to_path_buf)
        .or_else(|| exp.config.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    match run_experiment(&exp, command, &out) {
        Ok(v) => {
            print!("{}", v.table());
            if v.passed {
                EXIT_OK
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e @ RunError::Output(..)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CHECK_FAILED
        }
    }
}
