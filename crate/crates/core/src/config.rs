//! Experiment configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::env::EnvKind;
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, PolicyKind};
use crate::ppo::PpoConfig;
use crate::tensor::DType;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub n_train: usize,
    pub n_test: usize,
    pub policy: PolicyKind,
    pub attention_layers: usize,
    pub mask_temperature: f64,
    pub mask_beta_init: f64,
    pub precision: DType,
    pub out_dir: PathBuf,
    pub ppo: PpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvKind::Dodge,
            n_train: 20,
            n_test: 20,
            policy: PolicyKind::SparseMasked,
            attention_layers: 2,
            mask_temperature: 1.0,
            mask_beta_init: 2.0,
            precision: DType::F32,
            out_dir: PathBuf::from("runs"),
            ppo: PpoConfig::default(),
        }
    }
}

pub const KEYS: [&str; 26] = [
    "env",
    "n_train",
    "n_test",
    "policy",
    "attention_layers",
    "mask_temperature",
    "mask_beta_init",
    "precision",
    "out_dir",
    "gamma",
    "gae_lambda",
    "clip",
    "epochs",
    "minibatch",
    "rollout",
    "envs",
    "lr",
    "entropy_coef",
    "value_coef",
    "mask_coef",
    "alpha",
    "total_steps",
    "seed",
    "normalize_advantages",
    "max_grad_norm",
    "eval_interval",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for key '{key}'")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train and n_test must be at least 1"));
        }
        self.policy_config().attention.validate()?;
        self.ppo.validate()
    }

    pub fn policy_config(&self) -> PolicyConfig {
        let mut p = PolicyConfig::new(self.policy);
        p.attention.layers = self.attention_layers;
        p.attention.temperature = self.mask_temperature;
        p.attention.beta_init = self.mask_beta_init;
        p
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.ppo;
        match key {
            "env" => self.env = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "policy" => self.policy = parse(key, value)?,
            "attention_layers" => self.attention_layers = parse(key, value)?,
            "mask_temperature" => self.mask_temperature = parse(key, value)?,
            "mask_beta_init" => self.mask_beta_init = parse(key, value)?,
            "precision" => {
                self.precision = DType::parse(value)
                    .ok_or_else(|| Error::config(format!("invalid value '{value}' for key 'precision'")))?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "gamma" => p.gamma = parse(key, value)?,
            "gae_lambda" => p.gae_lambda = parse(key, value)?,
            "clip" => p.clip = parse(key, value)?,
            "epochs" => p.epochs = parse(key, value)?,
            "minibatch" => p.minibatch = parse(key, value)?,
            "rollout" => p.rollout = parse(key, value)?,
            "envs" => p.envs = parse(key, value)?,
            "lr" => p.lr = parse(key, value)?,
            "entropy_coef" => p.entropy_coef = parse(key, value)?,
            "value_coef" => p.value_coef = parse(key, value)?,
            "mask_coef" => p.mask_coef = parse(key, value)?,
            "alpha" => p.alpha = parse(key, value)?,
            "total_steps" => p.total_steps = parse(key, value)?,
            "seed" => p.seed = parse(key, value)?,
            "normalize_advantages" => p.normalize_advantages = parse(key, value)?,
            "max_grad_norm" => p.max_grad_norm = parse(key, value)?,
            "eval_interval" => p.eval_interval = parse(key, value)?,
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Text form of one key.
    pub fn get(&self, key: &str) -> Result<String> {
        let p = &self.ppo;
        Ok(match key {
            "env" => self.env.to_string(),
            "n_train" => self.n_train.to_string(),
            "n_test" => self.n_test.to_string(),
            "policy" => self.policy.to_string(),
            "attention_layers" => self.attention_layers.to_string(),
            "mask_temperature" => self.mask_temperature.to_string(),
            "mask_beta_init" => self.mask_beta_init.to_string(),
            "precision" => self.precision.name().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "gamma" => p.gamma.to_string(),
            "gae_lambda" => p.gae_lambda.to_string(),
            "clip" => p.clip.to_string(),
            "epochs" => p.epochs.to_string(),
            "minibatch" => p.minibatch.to_string(),
            "rollout" => p.rollout.to_string(),
            "envs" => p.envs.to_string(),
            "lr" => p.lr.to_string(),
            "entropy_coef" => p.entropy_coef.to_string(),
            "value_coef" => p.value_coef.to_string(),
            "mask_coef" => p.mask_coef.to_string(),
            "alpha" => p.alpha.to_string(),
            "total_steps" => p.total_steps.to_string(),
            "seed" => p.seed.to_string(),
            "normalize_advantages" => p.normalize_advantages.to_string(),
            "max_grad_norm" => p.max_grad_norm.to_string(),
            "eval_interval" => p.eval_interval.to_string(),
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        })
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(Error::config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            seen.push(key);
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Reduced-budget copy for smoke runs.
    pub fn smoke(mut self) -> Self {
        self.n_train = self.n_train.min(8);
        self.n_test = self.n_test.min(8);
        self.ppo.rollout = 16;
        self.ppo.envs = 2;
        self.ppo.minibatch = 16;
        self.ppo.epochs = 1;
        self.ppo.total_steps = 64;
        self.ppo.eval_interval = 1;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let mut c = ExperimentConfig::default();
        c.ppo.lr = 0.1 + 0.2;
        c.ppo.alpha = 1.0 / 3.0;
        c.env = EnvKind::Maze;
        c.policy = PolicyKind::InputMasked;
        c.out_dir = PathBuf::from("some/dir");
        assert_eq!(ExperimentConfig::parse_str(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = ExperimentConfig::parse_str("alpah = 0.1\n").unwrap_err();
        assert!(matches!(e, Error::Config(ref m) if m.contains("alpah")));
    }

    #[test]
    fn duplicate_and_bad_values_rejected() {
        assert!(ExperimentConfig::parse_str("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse_str("seed = x").is_err());
        assert!(ExperimentConfig::parse_str("precision = f16").is_err());
    }

    #[test]
    fn comments_and_blanks() {
        let c = ExperimentConfig::parse_str("# hi\n\nalpha = 0.2 # trailing\n").unwrap();
        assert_eq!(c.ppo.alpha, 0.2);
    }

    #[test]
    fn validation_catches_bad_temperature() {
        let mut c = ExperimentConfig::default();
        c.mask_temperature = 0.0;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
