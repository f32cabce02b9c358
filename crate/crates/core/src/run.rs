//! Run-directory layout: `{env}_{policy}_{alpha}_{seed}_{timestamp}/` holding
//! the config copy, metrics and checkpoints.

use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::policy::Policy;
use crate::ppo::{build_policy, FINAL_CHECKPOINT};
use crate::tensor::Scalar;

pub const CONFIG_FILE: &str = "config.cfg";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PATHS_FILE: &str = "paths.csv";
/// Wall-clock seconds of the training call, written when it finishes.
pub const TIMING_FILE: &str = "train_seconds.txt";

/// Name up to and including the separator before the timestamp.
pub fn run_prefix(cfg: &ExperimentConfig) -> String {
    format!("{}_{}_{}_{}_", cfg.env, cfg.policy, cfg.ppo.alpha, cfg.ppo.seed)
}

pub fn run_name(cfg: &ExperimentConfig, timestamp: &str) -> String {
    format!("{}{timestamp}", run_prefix(cfg))
}

/// Existing run directories under `cfg.out_dir` with the same env, policy,
/// α and seed, sorted by name.
pub fn existing_runs(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let dir = &cfg.out_dir;
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let prefix = run_prefix(cfg);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_dir() && name.starts_with(&prefix) {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_config(run: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(run.join(CONFIG_FILE))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Rebuilds the policy of a run and loads its final checkpoint.
pub fn load_policy<F: Scalar>(run: &Path, cfg: &ExperimentConfig) -> Result<(Policy<F>, ParamStore<F>)> {
    let (policy, mut store) = build_policy::<F>(cfg)?;
    let ckpt = run.join(FINAL_CHECKPOINT);
    if !ckpt.exists() {
        return Err(Error::Usage(format!("{} has no final checkpoint", run.display())));
    }
    store.load(&ckpt)?;
    Ok((policy, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvKind;
    use crate::policy::PolicyKind;

    #[test]
    fn names_follow_layout() {
        let mut c = ExperimentConfig::default();
        c.env = EnvKind::Maze;
        c.policy = PolicyKind::Cnn;
        c.ppo.alpha = 0.3;
        c.ppo.seed = 7;
        assert_eq!(run_name(&c, "20260101-000000"), "mazegrid_cnn_0.3_7_20260101-000000");
    }

    #[test]
    fn finds_only_matching_runs() {
        let tmp = tempfile::tempdir().unwrap();
        let mut c = ExperimentConfig::default();
        c.out_dir = tmp.path().to_path_buf();
        assert!(existing_runs(&c).unwrap().is_empty());
        std::fs::create_dir(tmp.path().join(run_name(&c, "a"))).unwrap();
        c.ppo.seed = 11;
        std::fs::create_dir(tmp.path().join(run_name(&c, "b"))).unwrap();
        assert_eq!(existing_runs(&c).unwrap().len(), 1);
        c.ppo.seed = 1;
        // seed 1 must not match seed 11
        assert!(existing_runs(&c).unwrap().is_empty());
    }
}
