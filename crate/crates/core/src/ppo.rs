//! Clipped-surrogate PPO with GAE, entropy bonus, value loss and the additive
//! path-sparsity loss, over vectorized gridworld rollouts.

use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attention::MaskMode;
use crate::autodiff::{Tape, Var};
use crate::config::ExperimentConfig;
use crate::env::{generate_level, make_split, Action, EnvKind, EnvState, LevelSpec};
use crate::error::{Error, Result};
use crate::params::{Adam, ParamId, ParamStore};
use crate::paths::{check_alpha, mask_loss_var, max_paths, path_total_var};
use crate::policy::{greedy_action, log_probs, sample_action, Policy, PolicyKind, PolicyVars};
use crate::rng::{stream, StreamRng};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout: usize,
    pub envs: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Weight λ_mask of the path-sparsity loss.
    pub mask_coef: f64,
    /// Target path fraction α.
    pub alpha: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub normalize_advantages: bool,
    /// Global gradient-norm clip; `0` disables.
    pub max_grad_norm: f64,
    /// Updates between evaluations.
    pub eval_interval: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 3,
            minibatch: 512,
            rollout: 256,
            envs: 8,
            lr: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            mask_coef: 1.0,
            alpha: 0.05,
            total_steps: 400_000,
            seed: 0,
            normalize_advantages: true,
            max_grad_norm: 0.5,
            eval_interval: 20,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("lr", self.lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("value_coef", self.value_coef),
            ("mask_coef", self.mask_coef),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.gamma > 1.0 || self.gae_lambda > 1.0 {
            return Err(Error::config("gamma and gae_lambda must not exceed 1"));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config(format!("clip must lie in (0, 1), got {}", self.clip)));
        }
        check_alpha(self.alpha)?;
        if self.epochs == 0 || self.minibatch == 0 || self.rollout == 0 || self.envs == 0 || self.eval_interval == 0 {
            return Err(Error::config("epochs, minibatch, rollout, envs and eval_interval must be at least 1"));
        }
        if self.total_steps < self.rollout * self.envs {
            return Err(Error::config(format!(
                "total_steps {} is less than one rollout ({} x {})",
                self.total_steps, self.rollout, self.envs
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.rollout * self.envs
    }

    pub fn num_updates(&self) -> usize {
        self.total_steps / self.batch_size()
    }
}

/// Generalized advantage estimates for one trajectory segment.
///
/// `last_value` bootstraps the state after the final step. Returns
/// `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::shape("compute_gae", &[n], &[values.len(), dones.len()]));
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Standardizes to zero mean and unit (population) variance.
pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    xs.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Flattened rollout data, one entry per (step, env).
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch<F> {
    pub observations: Vec<Tensor<F>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl<F> RolloutBatch<F> {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Anything PPO can optimize: maps an observation to action logits and a value.
pub trait ActorCritic<F: Scalar> {
    fn forward(&self, tape: &mut Tape<F>, store: &ParamStore<F>, obs: Var, mode: MaskMode<'_, F>) -> Result<PolicyVars<F>>;

    /// Maximum path count when the agent carries a path-sparsity loss.
    fn path_mu(&self) -> Option<f64> {
        None
    }
}

impl<F: Scalar> ActorCritic<F> for Policy<F> {
    fn forward(&self, tape: &mut Tape<F>, store: &ParamStore<F>, obs: Var, mode: MaskMode<'_, F>) -> Result<PolicyVars<F>> {
        Policy::forward(self, tape, store, obs, mode)
    }

    fn path_mu(&self) -> Option<f64> {
        if self.kind() != PolicyKind::SparseMasked {
            return None;
        }
        let trunk = self.trunk()?;
        Some(max_paths(trunk.num_tokens(), trunk.layers.len()))
    }
}

/// Mean loss terms over the samples of one update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub mask_loss: f64,
    pub path_fraction: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    /// Mean return of training episodes that finished during the rollout
    /// (NaN if none did).
    pub episode_return: f64,
}

struct SampleTerms {
    policy: f64,
    value: f64,
    entropy: f64,
    mask: f64,
    fraction: f64,
    clipped: bool,
}

#[allow(clippy::too_many_arguments)]
fn sample_loss<F: Scalar, P: ActorCritic<F>>(
    tape: &mut Tape<F>,
    policy: &P,
    store: &ParamStore<F>,
    batch: &RolloutBatch<F>,
    i: usize,
    adv: f64,
    cfg: &PpoConfig,
    rng: &mut StreamRng,
) -> Result<(Var, SampleTerms)> {
    let obs = tape.leaf(batch.observations[i].clone());
    let out = policy.forward(tape, store, obs, MaskMode::Train(rng))?;
    let a = tape.shape(out.logits)[0];
    let row = tape.reshape(out.logits, [1, a])?;
    let lp = tape.log_softmax_rows(row)?;
    let logp = tape.pick(lp, batch.actions[i])?;
    let old = tape.scalar(F::lit(batch.old_log_probs[i]));
    let diff = tape.sub(logp, old)?;
    let ratio = tape.exp(diff)?;
    let adv_f = F::lit(adv);
    let surr1 = tape.scale(ratio, adv_f)?;
    let clipped = tape.clamp(ratio, F::lit(1.0 - cfg.clip), F::lit(1.0 + cfg.clip))?;
    let surr2 = tape.scale(clipped, adv_f)?;
    let surr = tape.minimum(surr1, surr2)?;
    let policy_loss = tape.neg(surr)?;

    let ret = tape.scalar(F::lit(batch.returns[i]));
    let verr = tape.sub(out.value, ret)?;
    let value_loss = tape.square(verr)?;

    let p = tape.exp(lp)?;
    let plogp = tape.mul(p, lp)?;
    let neg_entropy = tape.sum(plogp)?;

    let v_term = tape.scale(value_loss, F::lit(cfg.value_coef))?;
    let e_term = tape.scale(neg_entropy, F::lit(cfg.entropy_coef))?;
    let mut loss = tape.add(policy_loss, v_term)?;
    loss = tape.add(loss, e_term)?;

    let (mut mask, mut fraction) = (0.0, f64::NAN);
    if let (Some(mu), Some(vars)) = (policy.path_mu(), out.aux.as_ref().and_then(|a| a.mask_vars.as_ref())) {
        let total = path_total_var(tape, vars)?;
        fraction = tape.value(total).item().as_f64() / mu;
        let ml = mask_loss_var(tape, total, mu, cfg.alpha)?;
        mask = tape.value(ml).item().as_f64();
        if cfg.mask_coef > 0.0 {
            let m_term = tape.scale(ml, F::lit(cfg.mask_coef))?;
            loss = tape.add(loss, m_term)?;
        }
    }
    let r = tape.value(ratio).item().as_f64();
    let terms = SampleTerms {
        policy: tape.value(policy_loss).item().as_f64(),
        value: tape.value(value_loss).item().as_f64(),
        entropy: -tape.value(neg_entropy).item().as_f64(),
        mask,
        fraction,
        clipped: (r - 1.0).abs() > cfg.clip,
    };
    Ok((loss, terms))
}

/// One PPO update (all epochs and minibatches) on a prepared batch.
///
/// `update` seeds the minibatch permutation and the per-sample mask noise.
pub fn ppo_update<F: Scalar, P: ActorCritic<F>>(
    batch: &RolloutBatch<F>,
    policy: &P,
    store: &mut ParamStore<F>,
    adam: &mut Adam<F>,
    cfg: &PpoConfig,
    update: u64,
) -> Result<LossStats> {
    const PERM: u64 = 11;
    const NOISE: u64 = 12;
    let n = batch.len();
    let mut adv = batch.advantages.clone();
    if cfg.normalize_advantages {
        normalize(&mut adv);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut sums = LossStats::default();
    let (mut count, mut mask_count, mut steps) = (0usize, 0usize, 0usize);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stream(cfg.seed, &[PERM, update, epoch as u64]));
        for chunk in order.chunks(cfg.minibatch) {
            store.zero_grad();
            let scale = F::lit(1.0 / chunk.len() as f64);
            for &i in chunk {
                let mut rng = stream(cfg.seed, &[NOISE, update, epoch as u64, i as u64]);
                let mut tape = Tape::new();
                let (loss, t) = sample_loss(&mut tape, policy, store, batch, i, adv[i], cfg, &mut rng)?;
                let lv = tape.value(loss).item().as_f64();
                if !lv.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss {lv} at update {update}, epoch {epoch}, sample {i}: policy {} value {} entropy {} mask {}",
                        t.policy, t.value, t.entropy, t.mask
                    )));
                }
                let loss = tape.scale(loss, scale)?;
                tape.backward(loss, store)?;
                sums.policy_loss += t.policy;
                sums.value_loss += t.value;
                sums.entropy += t.entropy;
                sums.clip_fraction += t.clipped as u8 as f64;
                if !t.fraction.is_nan() {
                    sums.mask_loss += t.mask;
                    sums.path_fraction += t.fraction;
                    mask_count += 1;
                }
                count += 1;
            }
            let norm = if cfg.max_grad_norm > 0.0 {
                store.clip_grad_norm(F::lit(cfg.max_grad_norm))
            } else {
                store.grad_norm()
            };
            if !norm.as_f64().is_finite() {
                return Err(Error::NonFinite(format!("gradient norm {norm} at update {update}, epoch {epoch}")));
            }
            sums.grad_norm += norm.as_f64();
            steps += 1;
            adam.step(store, F::lit(cfg.lr));
        }
    }
    let c = count.max(1) as f64;
    Ok(LossStats {
        policy_loss: sums.policy_loss / c,
        value_loss: sums.value_loss / c,
        entropy: sums.entropy / c,
        mask_loss: if mask_count > 0 { sums.mask_loss / mask_count as f64 } else { 0.0 },
        path_fraction: if mask_count > 0 { sums.path_fraction / mask_count as f64 } else { f64::NAN },
        clip_fraction: sums.clip_fraction / c,
        grad_norm: sums.grad_norm / steps.max(1) as f64,
        episode_return: f64::NAN,
    })
}

/// Two-armed bandit policy with a single state: logits and value are free
/// parameters.
pub struct BanditPolicy {
    pub logits: ParamId,
    pub value: ParamId,
}

impl BanditPolicy {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>) -> Self {
        BanditPolicy {
            logits: store.add("bandit.logits", Tensor::zeros([2])),
            value: store.add("bandit.value", Tensor::zeros(Vec::<usize>::new())),
        }
    }

    pub fn prob<F: Scalar>(&self, store: &ParamStore<F>, action: usize) -> f64 {
        let l: Vec<F> = store.value(self.logits).data().to_vec();
        log_probs(&l)[action].as_f64().exp()
    }
}

impl<F: Scalar> ActorCritic<F> for BanditPolicy {
    fn forward(&self, tape: &mut Tape<F>, store: &ParamStore<F>, _obs: Var, _mode: MaskMode<'_, F>) -> Result<PolicyVars<F>> {
        Ok(PolicyVars {
            logits: tape.param(store, self.logits),
            value: tape.param(store, self.value),
            aux: None,
        })
    }
}

/// PPO on a one-step bandit where action 0 pays 1 and action 1 pays 0.
/// Returns the probability of action 0 after each update.
pub fn train_bandit(cfg: &PpoConfig, updates: usize) -> Result<Vec<f64>> {
    let mut store = ParamStore::<f64>::new();
    let policy = BanditPolicy::new(&mut store);
    let mut adam = Adam::new(&store);
    let mut history = Vec::with_capacity(updates);
    for u in 0..updates {
        let mut rng = stream(cfg.seed, &[21, u as u64]);
        let logits: Vec<f64> = store.value(policy.logits).data().to_vec();
        let lp = log_probs(&logits);
        let v = store.value(policy.value).item();
        let mut batch = RolloutBatch::default();
        for _ in 0..cfg.batch_size() {
            let a = sample_action(&logits, &mut rng);
            batch.observations.push(Tensor::zeros([1]));
            batch.actions.push(a);
            batch.old_log_probs.push(lp[a]);
            batch.values.push(v);
            batch.rewards.push(if a == 0 { 1.0 } else { 0.0 });
            batch.dones.push(true);
        }
        let (adv, ret) = compute_gae(&batch.rewards, &batch.values, &batch.dones, 0.0, cfg.gamma, cfg.gae_lambda)?;
        batch.advantages = adv;
        batch.returns = ret;
        ppo_update(&batch, &policy, &mut store, &mut adam, cfg, u as u64)?;
        history.push(policy.prob(&store, 0));
    }
    Ok(history)
}

/// Observations from short random walks on the first train levels of `kind`.
pub fn sample_observations<F: Scalar>(kind: EnvKind, count: usize, seed: u64) -> Result<Vec<Tensor<F>>> {
    let mut rng = stream(seed, &[22]);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let mut env = EnvState::new(Arc::new(generate_level(kind, k as u64)));
        for _ in 0..rng.gen_range(0..16) {
            if env.done {
                break;
            }
            env.step(Action::from_index(rng.gen_range(0..Action::ALL.len())))?;
        }
        out.push(env.observe());
    }
    Ok(out)
}

/// Path fractions seen while optimizing the mask loss alone.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskOnlyTrace {
    /// Batch mean of the sampled training masks, one per step.
    pub sampled: Vec<f64>,
    /// Batch mean of the eval masks, before the first step and after each.
    pub eval: Vec<f64>,
}

/// Minimizes the mask loss alone (no RL terms) for a freshly initialized
/// sparse agent, with straight-through masks and Adam at `lr`, on `batch`
/// fixed observations.
pub fn train_mask_only(cfg: &ExperimentConfig, steps: usize, lr: f64, batch: usize) -> Result<MaskOnlyTrace> {
    let mut cfg = cfg.clone();
    cfg.policy = PolicyKind::SparseMasked;
    cfg.validate()?;
    let alpha = cfg.ppo.alpha;
    let (policy, mut store) = build_policy::<f32>(&cfg)?;
    let mu = policy.path_mu().expect("sparse agent has a path maximum");
    let obs = sample_observations::<f32>(cfg.env, batch, cfg.ppo.seed)?;
    let mut adam = Adam::new(&store);
    let fraction = |store: &ParamStore<f32>| -> Result<f64> {
        let mut sum = 0.0;
        for o in &obs {
            let out = policy.evaluate(store, o, MaskMode::Eval)?;
            sum += out.aux.and_then(|a| a.paths).map_or(f64::NAN, |p| p.fraction());
        }
        Ok(sum / obs.len() as f64)
    };
    let mut eval = vec![fraction(&store)?];
    let mut sampled = Vec::with_capacity(steps);
    for step in 0..steps {
        store.zero_grad();
        let mut sum = 0.0;
        for (i, o) in obs.iter().enumerate() {
            let mut rng = stream(cfg.ppo.seed, &[23, step as u64, i as u64]);
            let mut tape = Tape::new();
            let x = tape.leaf(o.clone());
            let out = policy.forward(&mut tape, &store, x, MaskMode::Train(&mut rng))?;
            let vars = out.aux.as_ref().and_then(|a| a.mask_vars.as_ref()).expect("sparse agent masks");
            let total = path_total_var(&mut tape, vars)?;
            sum += tape.value(total).item().as_f64() / mu;
            let loss = mask_loss_var(&mut tape, total, mu, alpha)?;
            let loss = tape.scale(loss, 1.0 / obs.len() as f32)?;
            tape.backward(loss, &mut store)?;
        }
        sampled.push(sum / obs.len() as f64);
        adam.step(&mut store, lr as f32);
        eval.push(fraction(&store)?);
    }
    Ok(MaskOnlyTrace { sampled, eval })
}

/// Result of greedy evaluation on a set of levels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub returns: Vec<f64>,
    /// Mean over visited states of the eval-mask path total (`μ` for dense
    /// attention, NaN for the CNN).
    pub total_paths: f64,
    pub mu: f64,
}

impl EvalSummary {
    pub fn mean_return(&self) -> f64 {
        mean(&self.returns)
    }

    pub fn std_return(&self) -> f64 {
        let m = self.mean_return();
        let n = self.returns.len() as f64;
        (self.returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n).sqrt()
    }

    pub fn path_fraction(&self) -> f64 {
        self.total_paths / self.mu
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Runs one greedy episode per level with deterministic eval-mode masks.
pub fn evaluate_levels<F: Scalar>(policy: &Policy<F>, store: &ParamStore<F>, kind: EnvKind, seeds: &[u64]) -> Result<EvalSummary> {
    let mu = policy
        .trunk()
        .map_or(f64::NAN, |t| max_paths(t.num_tokens(), t.layers.len()));
    let mut returns = Vec::with_capacity(seeds.len());
    let (mut path_sum, mut states) = (0.0, 0usize);
    for &seed in seeds {
        let mut env = EnvState::new(Arc::new(generate_level(kind, seed)));
        let mut total = 0.0;
        while !env.done {
            let out = policy.evaluate(store, &env.observe(), MaskMode::Eval)?;
            match out.aux.as_ref().and_then(|a| a.paths.as_ref()) {
                Some(pm) => path_sum += pm.total,
                None => path_sum += mu,
            }
            states += 1;
            total += env.step(Action::from_index(greedy_action(out.action_logits.data())))?.reward;
        }
        returns.push(total);
    }
    Ok(EvalSummary {
        returns,
        total_paths: path_sum / states.max(1) as f64,
        mu,
    })
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub policy_kind: PolicyKind,
    pub alpha: f64,
    pub split: String,
    pub mean_return: f64,
    pub std_return: f64,
    pub path_fraction: f64,
    pub mask_loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub const METRICS_HEADER: [&str; 11] = [
    "step",
    "policy_kind",
    "alpha",
    "split",
    "mean_return",
    "std_return",
    "path_fraction",
    "mask_loss",
    "policy_loss",
    "value_loss",
    "entropy",
];

pub const PATHS_HEADER: [&str; 4] = ["step", "total_paths", "mu", "path_fraction"];

fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

impl MetricsRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.policy_kind.to_string(),
            fmt_f(self.alpha),
            self.split.clone(),
            fmt_f(self.mean_return),
            fmt_f(self.std_return),
            fmt_f(self.path_fraction),
            fmt_f(self.mask_loss),
            fmt_f(self.policy_loss),
            fmt_f(self.value_loss),
            fmt_f(self.entropy),
        ]
    }
}

/// Row of `paths.csv`, averaged over both evaluation splits.
#[derive(Clone, Debug, PartialEq)]
pub struct PathRow {
    pub step: usize,
    pub total_paths: f64,
    pub mu: f64,
    pub path_fraction: f64,
}

struct CsvSink {
    metrics: csv::Writer<File>,
    paths: csv::Writer<File>,
}

impl CsvSink {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str| -> Result<csv::Writer<File>> {
            let path = dir.join(name);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            Ok(csv::Writer::from_writer(f))
        };
        let mut metrics = open("metrics.csv")?;
        metrics.write_record(METRICS_HEADER)?;
        let mut paths = open("paths.csv")?;
        paths.write_record(PATHS_HEADER)?;
        Ok(CsvSink { metrics, paths })
    }

    fn write(&mut self, rows: &[MetricsRow], path_row: &PathRow) -> Result<()> {
        for r in rows {
            self.metrics.write_record(r.record())?;
        }
        self.paths.write_record([
            path_row.step.to_string(),
            fmt_f(path_row.total_paths),
            fmt_f(path_row.mu),
            fmt_f(path_row.path_fraction),
        ])?;
        let flush = |w: &mut csv::Writer<File>| w.flush().map_err(|e| Error::io(PathBuf::from("metrics"), e));
        flush(&mut self.metrics)?;
        flush(&mut self.paths)
    }
}

pub struct TrainOutcome<F> {
    pub policy: Policy<F>,
    pub store: ParamStore<F>,
    pub metrics: Vec<MetricsRow>,
    pub paths: Vec<PathRow>,
    pub updates: Vec<LossStats>,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint_final.bin";
pub const LATEST_CHECKPOINT: &str = "checkpoint_latest.bin";

/// Builds the policy and parameters a config describes.
pub fn build_policy<F: Scalar>(cfg: &ExperimentConfig) -> Result<(Policy<F>, ParamStore<F>)> {
    let mut store = ParamStore::new();
    let mut rng = stream(cfg.ppo.seed, &[1]);
    let policy = Policy::new(cfg.policy_config(), &mut store, &mut rng)?;
    Ok((policy, store))
}

/// Full training run. With `run_dir`, metrics, path statistics and
/// checkpoints are written there as they are produced; `observer` sees every
/// metrics row.
pub fn train<F: Scalar>(
    cfg: &ExperimentConfig,
    run_dir: Option<&Path>,
    observer: &mut dyn FnMut(&MetricsRow),
) -> Result<TrainOutcome<F>> {
    const LEVEL: u64 = 31;
    const ACT: u64 = 32;
    const ROLL_NOISE: u64 = 33;
    const BOOT_NOISE: u64 = 34;
    cfg.validate()?;
    let ppo = &cfg.ppo;
    let (policy, mut store) = build_policy::<F>(cfg)?;
    let mut adam = Adam::new(&store);
    let (train_seeds, test_seeds) = make_split(cfg.env, cfg.n_train, cfg.n_test)?;
    let levels: Vec<Arc<LevelSpec>> = train_seeds.iter().map(|&s| Arc::new(generate_level(cfg.env, s))).collect();
    let mut sink = run_dir.map(CsvSink::create).transpose()?;

    let mut episodes = vec![0u64; ppo.envs];
    let mut running = vec![0.0; ppo.envs];
    let pick_level = |e: usize, k: u64| -> Arc<LevelSpec> {
        let mut r = stream(ppo.seed, &[LEVEL, e as u64, k]);
        levels[r.gen_range(0..levels.len())].clone()
    };
    let mut envs: Vec<EnvState> = (0..ppo.envs).map(|e| EnvState::new(pick_level(e, 0))).collect();

    let mut outcome_metrics = Vec::new();
    let mut outcome_paths = Vec::new();
    let mut updates = Vec::new();
    let mut last = LossStats {
        path_fraction: f64::NAN,
        ..LossStats::default()
    };
    let num_updates = ppo.num_updates();
    let mut evaluate = |step: usize, last: &LossStats, store: &ParamStore<F>| -> Result<()> {
        let mut rows = Vec::new();
        let mut path_acc = (0.0, 0.0);
        for (split, seeds) in [("train", &train_seeds), ("test", &test_seeds)] {
            let s = evaluate_levels(&policy, store, cfg.env, seeds)?;
            path_acc.0 += s.total_paths / 2.0;
            path_acc.1 = s.mu;
            rows.push(MetricsRow {
                step,
                policy_kind: cfg.policy,
                alpha: ppo.alpha,
                split: split.to_string(),
                mean_return: s.mean_return(),
                std_return: s.std_return(),
                path_fraction: s.path_fraction(),
                mask_loss: last.mask_loss,
                policy_loss: last.policy_loss,
                value_loss: last.value_loss,
                entropy: last.entropy,
            });
        }
        let prow = PathRow {
            step,
            total_paths: path_acc.0,
            mu: path_acc.1,
            path_fraction: path_acc.0 / path_acc.1,
        };
        if let Some(sink) = sink.as_mut() {
            sink.write(&rows, &prow)?;
        }
        if let Some(dir) = run_dir {
            store.save(dir.join(LATEST_CHECKPOINT))?;
        }
        rows.iter().for_each(&mut *observer);
        outcome_metrics.extend(rows);
        outcome_paths.push(prow);
        Ok(())
    };
    evaluate(0, &last, &store)?;

    for u in 0..num_updates {
        let mut per_env: Vec<RolloutBatch<F>> = (0..ppo.envs).map(|_| RolloutBatch::default()).collect();
        let mut finished = Vec::new();
        for t in 0..ppo.rollout {
            for (e, env) in envs.iter_mut().enumerate() {
                let obs = env.observe::<F>();
                let ids = [u as u64, t as u64, e as u64];
                let mut noise = stream(ppo.seed, &[ROLL_NOISE, ids[0], ids[1], ids[2]]);
                let out = policy.evaluate(&store, &obs, MaskMode::Train(&mut noise))?;
                let logits = out.action_logits.data();
                let a = sample_action(logits, &mut stream(ppo.seed, &[ACT, ids[0], ids[1], ids[2]]));
                let lp = log_probs(logits)[a].as_f64();
                let step = env.step(Action::from_index(a))?;
                let b = &mut per_env[e];
                b.observations.push(obs);
                b.actions.push(a);
                b.old_log_probs.push(lp);
                b.values.push(out.value.as_f64());
                b.rewards.push(step.reward);
                b.dones.push(step.done);
                running[e] += step.reward;
                if step.done {
                    finished.push(std::mem::take(&mut running[e]));
                    episodes[e] += 1;
                    *env = EnvState::new(pick_level(e, episodes[e]));
                }
            }
        }
        let mut batch = RolloutBatch::default();
        for (e, mut b) in per_env.into_iter().enumerate() {
            let mut noise = stream(ppo.seed, &[BOOT_NOISE, u as u64, e as u64]);
            let last_value = policy
                .evaluate(&store, &envs[e].observe(), MaskMode::Train(&mut noise))?
                .value
                .as_f64();
            let (adv, ret) = compute_gae(&b.rewards, &b.values, &b.dones, last_value, ppo.gamma, ppo.gae_lambda)?;
            batch.observations.append(&mut b.observations);
            batch.actions.append(&mut b.actions);
            batch.old_log_probs.append(&mut b.old_log_probs);
            batch.values.append(&mut b.values);
            batch.rewards.append(&mut b.rewards);
            batch.dones.append(&mut b.dones);
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
        }
        last = ppo_update(&batch, &policy, &mut store, &mut adam, ppo, u as u64)?;
        last.episode_return = if finished.is_empty() { f64::NAN } else { mean(&finished) };
        updates.push(last);
        if (u + 1) % ppo.eval_interval == 0 || u + 1 == num_updates {
            evaluate((u + 1) * ppo.batch_size(), &last, &store)?;
        }
    }
    if let Some(dir) = run_dir {
        store.save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        policy,
        store,
        metrics: outcome_metrics,
        paths: outcome_paths,
        updates,
    })
}

/// Mean return of uniformly random actions, `episodes` per level.
pub fn random_policy_return(kind: EnvKind, seeds: &[u64], episodes: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for &s in seeds {
        let level = Arc::new(generate_level(kind, s));
        for k in 0..episodes {
            let mut rng = stream(seed, &[s, k as u64]);
            let mut env = EnvState::new(level.clone());
            while !env.done {
                total += env.step(Action::from_index(rng.gen_range(0..Action::ALL.len())))?.reward;
            }
        }
    }
    Ok(total / (seeds.len() * episodes) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_telescopes_with_unit_discount() {
        let r = [1.0, 2.0, 0.5, 3.0];
        let v = [0.3, -0.2, 1.1, 0.0];
        let d = [false, false, false, true];
        let (adv, ret) = compute_gae(&r, &v, &d, 99.0, 1.0, 1.0).unwrap();
        for t in 0..4 {
            let tail: f64 = r[t..].iter().sum();
            assert!((adv[t] - (tail - v[t])).abs() < 1e-12);
            assert_eq!(ret[t], adv[t] + v[t]);
        }
    }

    /// `A_t = Σ_k (γλ)^k δ_{t+k}` summed directly, no backward recursion.
    fn gae_by_sums(r: &[f64], v: &[f64], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
        let value = |t: usize| if t < v.len() { v[t] } else { last };
        let delta = |t: usize| r[t] + gamma * value(t + 1) - v[t];
        (0..r.len())
            .map(|t| (t..r.len()).map(|k| (gamma * lambda).powi((k - t) as i32) * delta(k)).sum())
            .collect()
    }

    #[test]
    fn gae_three_step_hand_example() {
        let (r, v) = ([1.0, 0.0, 1.0], [0.5, 0.5, 0.5]);
        let (adv, ret) = compute_gae(&r, &v, &[false; 3], 0.0, 0.9, 0.95).unwrap();
        let want = gae_by_sums(&r, &v, 0.0, 0.9, 0.95);
        for t in 0..3 {
            assert!((adv[t] - want[t]).abs() < 1e-12, "{adv:?} vs {want:?}");
            assert!((ret[t] - (want[t] + v[t])).abs() < 1e-12);
        }
        // last step: δ = 1 + 0 − 0.5
        assert!((adv[2] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ExperimentConfig::default().smoke();
        let a = train::<f32>(&cfg, None, &mut |_| {}).unwrap();
        let b = train::<f32>(&cfg, None, &mut |_| {}).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.store.to_bytes(), b.store.to_bytes());
        let mut other = cfg.clone();
        other.ppo.seed += 1;
        let c = train::<f32>(&other, None, &mut |_| {}).unwrap();
        assert_ne!(a.store.to_bytes(), c.store.to_bytes());
    }

    #[test]
    fn gae_zero_everywhere() {
        let (adv, _) = compute_gae(&[0.0; 5], &[0.0; 5], &[false; 5], 0.0, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn gae_length_mismatch() {
        assert!(compute_gae(&[0.0; 3], &[0.0; 2], &[false; 3], 0.0, 0.9, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::default().validate().is_ok());
        let bad = [
            PpoConfig { clip: 1.0, ..Default::default() },
            PpoConfig { lr: 0.0, ..Default::default() },
            PpoConfig { alpha: 1.2, ..Default::default() },
            PpoConfig { total_steps: 100, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))));
        }
    }

    fn bandit_config() -> PpoConfig {
        PpoConfig {
            rollout: 64,
            envs: 1,
            minibatch: 64,
            lr: 1e-2,
            entropy_coef: 0.0,
            total_steps: 64,
            ..Default::default()
        }
    }

    #[test]
    fn mask_loss_alone_opens_masks_for_alpha_one() {
        let mut cfg = ExperimentConfig::default();
        cfg.ppo.alpha = 1.0;
        let h = train_mask_only(&cfg, 60, 1e-2, 4).unwrap().eval;
        assert!(h[0] < 1.0);
        assert!(*h.last().unwrap() > 0.95, "{:?}", &h[h.len() - 5..]);
    }

    #[test]
    fn bandit_learns_rewarded_arm() {
        let h = train_bandit(&bandit_config(), 200).unwrap();
        assert!(*h.last().unwrap() > 0.95, "{:?}", &h[h.len() - 5..]);
    }

    #[test]
    fn first_epoch_ratio_is_one() {
        let mut store = ParamStore::<f64>::new();
        let policy = BanditPolicy::new(&mut store);
        store.value_mut(policy.logits).data_mut()[0] = 0.4;
        let cfg = bandit_config();
        let logits: Vec<f64> = store.value(policy.logits).data().to_vec();
        let lp = log_probs(&logits);
        let batch = RolloutBatch {
            observations: vec![Tensor::zeros([1])],
            actions: vec![1],
            old_log_probs: vec![lp[1]],
            values: vec![0.0],
            rewards: vec![1.0],
            dones: vec![true],
            advantages: vec![1.0],
            returns: vec![1.0],
        };
        let mut tape = Tape::new();
        let mut rng = stream(0, &[0]);
        let (_, t) = sample_loss(&mut tape, &policy, &store, &batch, 0, 1.0, &cfg, &mut rng).unwrap();
        assert!((t.policy + 1.0).abs() < 1e-12);
        assert!(!t.clipped);
    }

    #[test]
    fn normalize_standardizes() {
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        normalize(&mut x);
        let m: f64 = x.iter().sum::<f64>() / 4.0;
        let v: f64 = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-6);
    }
}
