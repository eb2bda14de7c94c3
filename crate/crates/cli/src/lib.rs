//! Batch runner for the spin-system lab.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 numerical
//! failure (domain errors, unresolved estimates, non-convergence).

pub mod acceptance;
pub mod config;
pub mod output;
pub mod run;
pub mod sweep;

use std::path::{Path, PathBuf};

use anyhow::Context;

use config::{ensure_known_kind, ConfigError, ExperimentConfig};
use output::{default_out_dir, unix_now, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Maps an error chain to an exit code.
pub fn exit_code(e: &anyhow::Error) -> i32 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_INVALID;
        }
        if let Some(core) = cause.downcast_ref::<spinlab_core::Error>() {
            return match core {
                spinlab_core::Error::InvalidInput(_) | spinlab_core::Error::Dimension { .. } => EXIT_INVALID,
                _ => EXIT_NUMERICAL,
            };
        }
    }
    // I/O and anything else the user can fix by changing the invocation.
    EXIT_INVALID
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
}

/// Loads, validates, runs and persists one experiment. Returns the output directory.
pub fn run_file(path: &Path, opts: &RunOptions) -> anyhow::Result<PathBuf> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    ensure_known_kind(&text)?;
    let mut cfg = ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.output = Some(o.clone());
    }
    let dir = cfg
        .output
        .clone()
        .unwrap_or_else(|| default_out_dir(cfg.experiment.name()));
    cfg.output = Some(dir.clone());
    run::resolve(&mut cfg);

    let started = unix_now();
    let artifacts = run::execute(&cfg)?;
    let finished = unix_now();
    artifacts.persist(&dir)?;
    let mut outputs = artifacts.names();
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        tool: "spinlab",
        version: env!("CARGO_PKG_VERSION"),
        experiment: cfg.experiment.name(),
        config: &cfg,
        seed: cfg.seed,
        threads: opts.threads,
        started_unix: started,
        finished_unix: finished,
        outputs,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    output::write_atomic(&dir.join("manifest.json"), &bytes)?;
    Ok(dir)
}

/// Thread count from the flag, then `SPINLAB_THREADS`, then rayon's default.
pub fn resolve_threads(flag: Option<usize>) -> anyhow::Result<usize> {
    let n = match flag {
        Some(k) => k,
        None => match std::env::var("SPINLAB_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("SPINLAB_THREADS={v:?} is not a count")))?,
            Err(_) => 0,
        },
    };
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        let e: anyhow::Error = spinlab_core::Error::Domain("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_NUMERICAL);
        let e: anyhow::Error = spinlab_core::Error::InvalidInput("x".into()).into();
        assert_eq!(exit_code(&e.context("wrapped")), EXIT_INVALID);
        let e: anyhow::Error = ConfigError::Invalid("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_INVALID);
        let e: anyhow::Error = spinlab_core::Error::Unresolved("x".into()).into();
        assert_eq!(exit_code(&e), EXIT_NUMERICAL);
    }
}
