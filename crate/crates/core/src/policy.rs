//! The four agents behind one interface: CNN, dense attention, input-masked
//! attention and sparse masked attention.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::attention::{AttentionConfig, AttnRecords, MaskMode, MaskSet, MaskVars, Trunk};
use crate::autodiff::{Tape, Var};
use crate::env::NUM_ACTIONS;
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, ConvSpec, Linear};
use crate::params::ParamStore;
use crate::paths::{path_matrix_of, PathMatrix};
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{Extractor, TokenizerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Cnn,
    Attention,
    InputMasked,
    SparseMasked,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Cnn,
        PolicyKind::Attention,
        PolicyKind::InputMasked,
        PolicyKind::SparseMasked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Cnn => "cnn",
            PolicyKind::Attention => "attention",
            PolicyKind::InputMasked => "input_masked",
            PolicyKind::SparseMasked => "sparse_masked",
        }
    }

    pub fn uses_attention(self) -> bool {
        self != PolicyKind::Cnn
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown policy kind '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub tokens: TokenizerConfig,
    pub attention: AttentionConfig,
    pub hidden: usize,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        PolicyConfig {
            kind,
            tokens: TokenizerConfig::default(),
            attention: AttentionConfig::default(),
            hidden: 64,
        }
    }
}

/// Conv net producing a per-pixel soft mask in `[0, 1]` at the observation's
/// resolution.
#[derive(Clone, Debug)]
pub struct InputMaskNet {
    pub conv: ConvLayer,
    pub fc1: Linear,
    pub fc2: Linear,
    coarse: (usize, usize),
    factor: usize,
    channels: usize,
}

impl InputMaskNet {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, tokens: &TokenizerConfig, rng: &mut impl Rng) -> Result<Self> {
        let spec = ConvSpec {
            filters: 8,
            kernel: 2,
            stride: 2,
        };
        if tokens.height % 2 != 0 || tokens.width % 2 != 0 {
            return Err(Error::config("input mask net needs even observation sides"));
        }
        let coarse = (tokens.height / 2, tokens.width / 2);
        let flat = spec.filters * coarse.0 * coarse.1;
        Ok(InputMaskNet {
            conv: ConvLayer::new(store, &format!("{name}.conv"), tokens.channels, spec, rng),
            fc1: Linear::new(store, &format!("{name}.fc1"), flat, 32, 1.0, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 32, coarse.0 * coarse.1, 1.0, rng),
            coarse,
            factor: 2,
            channels: tokens.channels,
        })
    }

    /// Per-pixel mask `1×H×W`.
    pub fn mask<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, obs: Var) -> Result<Var> {
        let h = self.conv.forward(tape, store, obs)?;
        let n = tape.value(h).numel();
        let h = tape.reshape(h, [1, n])?;
        let h = self.fc1.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = self.fc2.forward(tape, store, h)?;
        let m = tape.sigmoid(h)?;
        let m = tape.reshape(m, [1, self.coarse.0, self.coarse.1])?;
        tape.upsample_nearest(m, self.factor)
    }

    /// `mask ⊙ obs`, the `1×H×W` mask shared across channels.
    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, mask: Var, obs: Var) -> Result<Var> {
        let shape = tape.shape(obs).to_vec();
        let m = tape.broadcast_rows(mask, self.channels)?;
        let m = tape.reshape(m, shape)?;
        tape.mul(m, obs)
    }
}

#[derive(Clone, Debug)]
enum Body<F> {
    Cnn { extractor: Extractor, fc1: Linear, fc2: Linear },
    Attention { trunk: Trunk<F>, hidden: Linear },
    InputMasked { mask_net: InputMaskNet, trunk: Trunk<F>, hidden: Linear },
    Sparse { trunk: Trunk<F>, hidden: Linear },
}

/// Extra outputs of the attention agents.
pub struct Aux<F> {
    pub records: AttnRecords<F>,
    pub masks: Option<MaskSet<F>>,
    pub paths: Option<PathMatrix<F>>,
    pub mask_vars: Option<MaskVars>,
    /// Input-masked agent only: the `1×H×W` pixel mask.
    pub input_mask: Option<Var>,
}

/// Tape nodes of one policy evaluation.
pub struct PolicyVars<F> {
    /// `[NUM_ACTIONS]` unnormalized log-probabilities.
    pub logits: Var,
    /// Scalar state value.
    pub value: Var,
    pub aux: Option<Aux<F>>,
}

/// Plain values of one policy evaluation.
pub struct PolicyOutput<F> {
    pub action_logits: Tensor<F>,
    pub value: F,
    pub aux: Option<Aux<F>>,
}

#[derive(Clone, Debug)]
pub struct Policy<F> {
    pub config: PolicyConfig,
    body: Body<F>,
    pi: Linear,
    v: Linear,
}

impl<F: Scalar> Policy<F> {
    pub fn new(config: PolicyConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        let hidden = config.hidden;
        let tokens = config.tokens.clone();
        let dense_trunk = |store: &mut ParamStore<F>, rng: &mut _, masked| {
            Trunk::new(store, "trunk", tokens.clone(), config.attention.clone(), masked, rng)
        };
        let body = match config.kind {
            PolicyKind::Cnn => {
                let extractor = Extractor::new(store, "cnn", tokens.clone(), rng)?;
                let (h, w) = tokens.grid_dims()?;
                let flat = tokens.token_dim() * h * w;
                Body::Cnn {
                    extractor,
                    fc1: Linear::new(store, "cnn.fc1", flat, hidden, 2f64.sqrt(), rng),
                    fc2: Linear::new(store, "cnn.fc2", hidden, hidden, 2f64.sqrt(), rng),
                }
            }
            PolicyKind::Attention => {
                let trunk = dense_trunk(store, rng, false)?;
                let d = trunk.tokenizer.token_dim();
                Body::Attention {
                    trunk,
                    hidden: Linear::new(store, "head.hidden", d, hidden, 2f64.sqrt(), rng),
                }
            }
            PolicyKind::InputMasked => {
                let mask_net = InputMaskNet::new(store, "input_mask", &tokens, rng)?;
                let trunk = dense_trunk(store, rng, false)?;
                let d = trunk.tokenizer.token_dim();
                Body::InputMasked {
                    mask_net,
                    trunk,
                    hidden: Linear::new(store, "head.hidden", d, hidden, 2f64.sqrt(), rng),
                }
            }
            PolicyKind::SparseMasked => {
                let trunk = dense_trunk(store, rng, true)?;
                let d = trunk.tokenizer.token_dim();
                Body::Sparse {
                    trunk,
                    hidden: Linear::new(store, "head.hidden", d, hidden, 2f64.sqrt(), rng),
                }
            }
        };
        let pi = Linear::new(store, "head.pi", hidden, NUM_ACTIONS, 0.01, rng);
        let v = Linear::new(store, "head.v", hidden, 1, 1.0, rng);
        Ok(Policy { config, body, pi, v })
    }

    pub fn kind(&self) -> PolicyKind {
        self.config.kind
    }

    pub fn trunk(&self) -> Option<&Trunk<F>> {
        match &self.body {
            Body::Cnn { .. } => None,
            Body::Attention { trunk, .. } | Body::InputMasked { trunk, .. } | Body::Sparse { trunk, .. } => Some(trunk),
        }
    }

    pub fn input_mask_net(&self) -> Option<&InputMaskNet> {
        match &self.body {
            Body::InputMasked { mask_net, .. } => Some(mask_net),
            _ => None,
        }
    }

    /// Records the policy on `tape`. `mode` only affects the sparse agent
    /// (and `Forced`, which any attention agent honours).
    pub fn forward(&self, tape: &mut Tape<F>, store: &ParamStore<F>, obs: Var, mode: MaskMode<'_, F>) -> Result<PolicyVars<F>> {
        let (h, aux) = match &self.body {
            Body::Cnn { extractor, fc1, fc2 } => {
                let x = extractor.features(tape, store, obs)?;
                let n = tape.value(x).numel();
                let x = tape.reshape(x, [1, n])?;
                let x = fc1.forward(tape, store, x)?;
                let x = tape.relu(x)?;
                let x = fc2.forward(tape, store, x)?;
                (tape.relu(x)?, None)
            }
            Body::Attention { trunk, hidden } | Body::Sparse { trunk, hidden } => {
                let mode = match (self.kind(), mode) {
                    (PolicyKind::Attention, MaskMode::Forced(f)) => MaskMode::Forced(f),
                    (PolicyKind::Attention, _) => MaskMode::Dense,
                    (_, m) => m,
                };
                let out = trunk.forward(tape, store, obs, mode)?;
                let h = head_hidden(tape, store, hidden, out.features)?;
                let paths = out.masks.as_ref().map(path_matrix_of).transpose()?;
                (
                    h,
                    Some(Aux {
                        records: out.records,
                        masks: out.masks,
                        paths,
                        mask_vars: out.mask_vars,
                        input_mask: None,
                    }),
                )
            }
            Body::InputMasked { mask_net, trunk, hidden } => {
                let m = mask_net.mask(tape, store, obs)?;
                let masked = mask_net.apply(tape, m, obs)?;
                let mode = match mode {
                    MaskMode::Forced(f) => MaskMode::Forced(f),
                    _ => MaskMode::Dense,
                };
                let out = trunk.forward(tape, store, masked, mode)?;
                let h = head_hidden(tape, store, hidden, out.features)?;
                (
                    h,
                    Some(Aux {
                        records: out.records,
                        masks: None,
                        paths: None,
                        mask_vars: None,
                        input_mask: Some(m),
                    }),
                )
            }
        };
        let logits = self.pi.forward(tape, store, h)?;
        let logits = tape.reshape(logits, [NUM_ACTIONS])?;
        let value = self.v.forward(tape, store, h)?;
        let value = tape.reshape(value, Vec::<usize>::new())?;
        Ok(PolicyVars { logits, value, aux })
    }

    /// Evaluates on a fresh tape and returns plain values.
    pub fn evaluate(&self, store: &ParamStore<F>, obs: &Tensor<F>, mode: MaskMode<'_, F>) -> Result<PolicyOutput<F>> {
        let mut tape = Tape::new();
        let o = tape.leaf(obs.clone());
        let out = self.forward(&mut tape, store, o, mode)?;
        Ok(PolicyOutput {
            action_logits: tape.value(out.logits).clone(),
            value: tape.value(out.value).item(),
            aux: out.aux,
        })
    }
}

fn head_hidden<F: Scalar>(tape: &mut Tape<F>, store: &ParamStore<F>, hidden: &Linear, features: Var) -> Result<Var> {
    let d = tape.value(features).numel();
    let x = tape.reshape(features, [1, d])?;
    let x = hidden.forward(tape, store, x)?;
    tape.relu(x)
}

/// Numerically stable `log softmax` of a logit vector.
pub fn log_probs<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let lse = logits.iter().map(|&l| (l - max).exp()).sum::<F>().ln() + max;
    logits.iter().map(|&l| l - lse).collect()
}

pub fn probs<F: Scalar>(logits: &[F]) -> Vec<F> {
    log_probs(logits).into_iter().map(F::exp).collect()
}

/// Samples an index from the softmax of `logits`.
pub fn sample_action<F: Scalar>(logits: &[F], rng: &mut impl Rng) -> usize {
    let p = probs(logits);
    let u = F::lit(rng.gen::<f64>());
    let mut acc = F::zero();
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// First index of the largest logit.
pub fn greedy_action<F: Scalar>(logits: &[F]) -> usize {
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn build(kind: PolicyKind) -> (ParamStore<f64>, Policy<f64>) {
        let mut store = ParamStore::new();
        let p = Policy::new(PolicyConfig::new(kind), &mut store, &mut stream(4, &[])).unwrap();
        (store, p)
    }

    fn obs(seed: u64) -> Tensor<f64> {
        let mut rng = stream(seed, &[7]);
        Tensor::from_fn([4, 16, 16], |_| rng.gen::<f64>())
    }

    #[test]
    fn zero_weights_give_uniform_policy_and_zero_value() {
        for kind in PolicyKind::ALL {
            let (mut store, p) = build(kind);
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.value(id).shape().to_vec();
                store.set_value(id, Tensor::zeros(shape)).unwrap();
            }
            let mut rng = stream(0, &[]);
            let out = p.evaluate(&store, &obs(1), MaskMode::Train(&mut rng)).unwrap();
            let pr = probs(out.action_logits.data());
            assert!(pr.iter().all(|&x| (x - 0.2).abs() < 1e-12), "{kind}");
            assert_eq!(out.value, 0.0);
        }
    }

    #[test]
    fn interface_parity() {
        for kind in PolicyKind::ALL {
            let (store, p) = build(kind);
            let out = p.evaluate(&store, &obs(2), MaskMode::Eval).unwrap();
            assert_eq!(out.action_logits.shape(), &[NUM_ACTIONS]);
            assert!(out.action_logits.all_finite() && out.value.is_finite());
            let s: f64 = probs(out.action_logits.data()).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert_eq!(out.aux.is_some(), kind.uses_attention());
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("mlp".parse::<PolicyKind>().is_err());
    }

    #[test]
    fn sampling_follows_distribution() {
        let logits = [0.0f64, (3.0f64).ln(), f64::NEG_INFINITY, 0.0, 0.0];
        let mut rng = stream(1, &[]);
        let mut counts = [0usize; 5];
        for _ in 0..6000 {
            counts[sample_action(&logits, &mut rng)] += 1;
        }
        assert_eq!(counts[2], 0);
        assert!((counts[1] as f64 / 6000.0 - 0.5).abs() < 0.03);
        assert_eq!(greedy_action(&logits), 1);
    }
}
