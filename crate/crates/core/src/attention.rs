//! Multi-layer self-attention with learned stochastic relation masks.
//!
//! Each layer computes mask logits `Q_m K_mᵀ + β` from its own input tokens
//! using mask embeddings separate from the attention embeddings, draws a hard
//! binary mask with the straight-through Gumbel (logistic noise) trick, and
//! applies it inside a renormalized softmax:
//!
//! ```text
//! h = (Z ⊘ (Z 1 1ᵀ)) V,   Z = M ⊙ exp(Q Kᵀ / √d_k)
//! ```
//!
//! A final aggregation layer attends from one learned query over the last
//! layer's tokens under its own `1×n` mask.

use rand::distributions::Open01;
use rand::Rng;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::StreamRng;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::{Tokenizer, TokenizerConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub layers: usize,
    pub key_dim: usize,
    pub mask_dim: usize,
    pub ff_dim: usize,
    /// Initial mask-logit bias β.
    pub beta_init: f64,
    /// Gumbel temperature τ.
    pub temperature: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            layers: 2,
            key_dim: 16,
            mask_dim: 8,
            ff_dim: 64,
            beta_init: 2.0,
            temperature: 1.0,
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::config(format!(
                "mask temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.key_dim == 0 || self.mask_dim == 0 || self.ff_dim == 0 {
            return Err(Error::config("attention dimensions must be positive"));
        }
        Ok(())
    }
}

/// One sampled relation mask with its relaxation.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask<F> {
    pub logits: Tensor<F>,
    /// `σ((logits + g)/τ)` in training, `σ(logits)` otherwise.
    pub soft: Tensor<F>,
    /// Binary mask actually applied.
    pub hard: Tensor<F>,
}

/// All relation masks of one forward pass: one `n×n` per attention layer plus
/// the `1×n` aggregation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet<F> {
    pub layers: Vec<LayerMask<F>>,
    pub output: LayerMask<F>,
    pub temperature: f64,
}

impl<F: Scalar> MaskSet<F> {
    pub fn hard_layers(&self) -> Vec<Tensor<F>> {
        self.layers.iter().map(|m| m.hard.clone()).collect()
    }

    pub fn forced(&self) -> ForcedMasks<F> {
        ForcedMasks {
            layers: self.hard_layers(),
            output: self.output.hard.clone(),
        }
    }
}

/// Hard masks imposed on a forward pass instead of computed ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ForcedMasks<F> {
    pub layers: Vec<Tensor<F>>,
    pub output: Tensor<F>,
}

impl<F: Scalar> ForcedMasks<F> {
    pub fn ones(n: usize, layers: usize) -> Self {
        ForcedMasks {
            layers: vec![Tensor::ones([n, n]); layers],
            output: Tensor::ones([1, n]),
        }
    }

    pub fn zeros(n: usize, layers: usize) -> Self {
        ForcedMasks {
            layers: vec![Tensor::zeros([n, n]); layers],
            output: Tensor::zeros([1, n]),
        }
    }
}

/// How relation masks are produced during a forward pass.
pub enum MaskMode<'a, F> {
    /// No masking: plain softmax attention, mask embeddings unused.
    Dense,
    /// Hard sample with straight-through gradient.
    Train(&'a mut StreamRng),
    /// The soft relaxation itself is applied as the mask (no rounding).
    Relaxed(&'a mut StreamRng),
    /// Deterministic `1[σ(logits) > 0.5]`, no noise, no gradient.
    Eval,
    /// Supplied hard masks, no gradient.
    Forced(&'a ForcedMasks<F>),
}

impl<F> MaskMode<'_, F> {
    pub fn is_dense(&self) -> bool {
        matches!(self, MaskMode::Dense)
    }
}

/// Logistic noise `log u − log(1−u)`, `u ~ U(0,1)` open.
pub fn logistic_noise<F: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u: f64 = rng.sample(Open01);
        F::lit(u.ln() - (1.0 - u).ln())
    })
}

fn threshold<F: Scalar>(soft: &Tensor<F>) -> Tensor<F> {
    let half = F::lit(0.5);
    soft.map(|s| if s > half { F::one() } else { F::zero() })
}

/// Samples a mask from logits without recording a tape.
///
/// With `noise`, `soft = σ((logits + noise)/τ)`; without, `soft = σ(logits)`.
/// `hard = 1[soft > 0.5]` (strict).
pub fn sample_mask<F: Scalar>(logits: &Tensor<F>, noise: Option<&Tensor<F>>, temperature: f64) -> Result<LayerMask<F>> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("mask temperature must be positive, got {temperature}")));
    }
    let soft = match noise {
        Some(g) => {
            if g.shape() != logits.shape() {
                return Err(Error::shape("sample_mask", logits.shape(), g.shape()));
            }
            let inv = F::lit(1.0 / temperature);
            Tensor::new(
                logits.shape().to_vec(),
                logits
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&l, &n)| sigmoid((l + n) * inv))
                    .collect(),
            )?
        }
        None => logits.map(sigmoid),
    };
    let hard = threshold(&soft);
    Ok(LayerMask {
        logits: logits.clone(),
        soft,
        hard,
    })
}

/// Turns a logits node into the mask node used by attention, per `mode`.
fn realize_mask<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    mode: &mut MaskMode<'_, F>,
    temperature: f64,
    forced: Option<&Tensor<F>>,
) -> Result<(Var, LayerMask<F>)> {
    let logit_vals = tape.value(logits).clone();
    match mode {
        MaskMode::Train(rng) | MaskMode::Relaxed(rng) => {
            let noise = logistic_noise::<F>(logit_vals.shape(), &mut **rng);
            let g = tape.leaf(noise);
            let z = tape.add(logits, g)?;
            let z = tape.scale(z, F::lit(1.0 / temperature))?;
            let soft = tape.sigmoid(z)?;
            let soft_vals = tape.value(soft).clone();
            let hard_vals = threshold(&soft_vals);
            let record = LayerMask {
                logits: logit_vals,
                soft: soft_vals,
                hard: hard_vals.clone(),
            };
            if matches!(mode, MaskMode::Relaxed(_)) {
                Ok((soft, record))
            } else {
                Ok((tape.straight_through(hard_vals, soft)?, record))
            }
        }
        MaskMode::Eval => {
            let m = sample_mask(&logit_vals, None, temperature)?;
            let v = tape.leaf(m.hard.clone());
            Ok((v, m))
        }
        MaskMode::Forced(_) | MaskMode::Dense => {
            let hard = forced.cloned().unwrap_or_else(|| Tensor::ones(logit_vals.shape().to_vec()));
            if hard.shape() != logit_vals.shape() {
                return Err(Error::shape("forced mask", logit_vals.shape(), hard.shape()));
            }
            let v = tape.leaf(hard.clone());
            Ok((
                v,
                LayerMask {
                    soft: logit_vals.map(sigmoid),
                    logits: logit_vals,
                    hard,
                },
            ))
        }
    }
}

/// Mask-embedding parameters of one layer.
#[derive(Clone, Debug)]
pub struct MaskEmbedding {
    pub query: ParamId,
    pub key: ParamId,
    pub beta: ParamId,
}

/// Single-head masked self-attention layer with residual, layer norm and a
/// per-token feedforward block.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mask: Option<MaskEmbedding>,
    pub norm: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub key_dim: usize,
}

impl AttentionLayer {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        cfg: &AttentionConfig,
        masked: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        let proj = |store: &mut ParamStore<F>, tag: &str, cols: usize, rng: &mut _| {
            store.add(format!("{name}.{tag}"), uniform(&[d, cols], b, rng))
        };
        let wq = proj(store, "wq", cfg.key_dim, rng);
        let wk = proj(store, "wk", cfg.key_dim, rng);
        let wv = proj(store, "wv", cfg.key_dim, rng);
        let wo = store.add(
            format!("{name}.wo"),
            uniform(&[cfg.key_dim, d], 1.0 / (cfg.key_dim as f64).sqrt(), rng),
        );
        let mask = masked.then(|| MaskEmbedding {
            query: proj(store, "mask_q", cfg.mask_dim, rng),
            key: proj(store, "mask_k", cfg.mask_dim, rng),
            beta: store.add(format!("{name}.mask_beta"), Tensor::scalar(F::lit(cfg.beta_init))),
        });
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        let ff1 = Linear::new(store, &format!("{name}.ff1"), d, cfg.ff_dim, 1.0, rng);
        let ff2 = Linear::new(store, &format!("{name}.ff2"), cfg.ff_dim, d, 1.0, rng);
        AttentionLayer {
            wq,
            wk,
            wv,
            wo,
            mask,
            norm,
            ff1,
            ff2,
            key_dim: cfg.key_dim,
        }
    }

    /// `Q_m K_mᵀ + β` over this layer's input tokens (`n×n`).
    pub fn mask_logits<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Option<Var>> {
        let Some(m) = &self.mask else { return Ok(None) };
        let wq = tape.param(store, m.query);
        let wk = tape.param(store, m.key);
        let beta = tape.param(store, m.beta);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        Ok(Some(tape.add(s, beta)?))
    }

    /// Normalized attention matrix; `mask = None` is plain softmax attention.
    pub fn attention<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let wq = tape.param(store, self.wq);
        let wk = tape.param(store, self.wk);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, F::lit(1.0 / (self.key_dim as f64).sqrt()))?;
        match mask {
            Some(m) => tape.masked_softmax_rows(s, m),
            None => tape.softmax_rows(s),
        }
    }

    /// Full layer: masked attention, residual + layer norm, then a per-token
    /// feedforward block with residual. Returns `(output, attention)`.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let p = self.attention(tape, store, x, mask)?;
        let wv = tape.param(store, self.wv);
        let wo = tape.param(store, self.wo);
        let v = tape.matmul(x, wv)?;
        let h = tape.matmul(p, v)?;
        let a = tape.matmul(h, wo)?;
        let r = tape.add(x, a)?;
        let x1 = self.norm.forward(tape, store, r)?;
        let f = self.ff1.forward(tape, store, x1)?;
        let f = tape.relu(f)?;
        let f = self.ff2.forward(tape, store, f)?;
        let out = tape.add(x1, f)?;
        Ok((out, p))
    }
}

/// Learned-query attention pooling of `n` tokens into one vector.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub query: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub mask: Option<MaskEmbedding>,
    pub key_dim: usize,
}

impl Aggregator {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        cfg: &AttentionConfig,
        masked: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let b = 1.0 / (d as f64).sqrt();
        let query = store.add(
            format!("{name}.query"),
            uniform(&[1, cfg.key_dim], 1.0 / (cfg.key_dim as f64).sqrt(), rng),
        );
        let wk = store.add(format!("{name}.wk"), uniform(&[d, cfg.key_dim], b, rng));
        let wv = store.add(format!("{name}.wv"), uniform(&[d, d], b, rng));
        let mask = masked.then(|| MaskEmbedding {
            query: store.add(
                format!("{name}.mask_q"),
                uniform(&[1, cfg.mask_dim], 1.0 / (cfg.mask_dim as f64).sqrt(), rng),
            ),
            key: store.add(format!("{name}.mask_k"), uniform(&[d, cfg.mask_dim], b, rng)),
            beta: store.add(format!("{name}.mask_beta"), Tensor::scalar(F::lit(cfg.beta_init))),
        });
        Aggregator {
            query,
            wk,
            wv,
            mask,
            key_dim: cfg.key_dim,
        }
    }

    /// `q_m K_mᵀ + β` (`1×n`).
    pub fn mask_logits<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Result<Option<Var>> {
        let Some(m) = &self.mask else { return Ok(None) };
        let q = tape.param(store, m.query);
        let wk = tape.param(store, m.key);
        let beta = tape.param(store, m.beta);
        let k = tape.matmul(x, wk)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        Ok(Some(tape.add(s, beta)?))
    }

    /// Returns `(features [d], attention row 1×n)`; an all-zero mask yields
    /// the zero vector.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        mask: Option<Var>,
    ) -> Result<(Var, Var)> {
        let q = tape.param(store, self.query);
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        let k = tape.matmul(x, wk)?;
        let kt = tape.transpose(k)?;
        let s = tape.matmul(q, kt)?;
        let s = tape.scale(s, F::lit(1.0 / (self.key_dim as f64).sqrt()))?;
        let p = match mask {
            Some(m) => tape.masked_softmax_rows(s, m)?,
            None => tape.softmax_rows(s)?,
        };
        let v = tape.matmul(x, wv)?;
        let out = tape.matmul(p, v)?;
        let d = tape.shape(out)[1];
        Ok((tape.reshape(out, [d])?, p))
    }
}

/// Attention matrix and applied mask of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord<F> {
    pub attention: Tensor<F>,
    pub mask: Tensor<F>,
}

/// Per-layer attention records of one forward pass, for path accounting and
/// visualization.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnRecords<F> {
    pub layers: Vec<LayerRecord<F>>,
    pub output: LayerRecord<F>,
}

/// Differentiable mask nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct MaskVars {
    pub layers: Vec<Var>,
    pub output: Var,
}

pub struct TrunkOutput<F> {
    /// Aggregated feature vector `[d]`.
    pub features: Var,
    /// Input tokens `n×d`.
    pub tokens: Var,
    /// `None` for dense (unmasked) passes.
    pub masks: Option<MaskSet<F>>,
    pub mask_vars: Option<MaskVars>,
    pub records: AttnRecords<F>,
}

/// Tokenizer → attention layers → aggregation.
#[derive(Clone, Debug)]
pub struct Trunk<F> {
    pub tokenizer: Tokenizer<F>,
    pub layers: Vec<AttentionLayer>,
    pub aggregator: Aggregator,
    pub config: AttentionConfig,
    pub masked: bool,
}

impl<F: Scalar> Trunk<F> {
    /// `masked = false` builds the dense attention trunk without any
    /// mask-embedding parameters.
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        tokens: TokenizerConfig,
        config: AttentionConfig,
        masked: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let tokenizer = Tokenizer::new(store, &format!("{name}.tok"), tokens, rng)?;
        let d = tokenizer.token_dim();
        let layers = (0..config.layers)
            .map(|l| AttentionLayer::new(store, &format!("{name}.layer{l}"), d, &config, masked, rng))
            .collect();
        let aggregator = Aggregator::new(store, &format!("{name}.agg"), d, &config, masked, rng);
        Ok(Trunk {
            tokenizer,
            layers,
            aggregator,
            config,
            masked,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokenizer.num_tokens()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        obs: Var,
        mode: MaskMode<'_, F>,
    ) -> Result<TrunkOutput<F>> {
        let grid = self.tokenizer.tokenize(tape, store, obs)?;
        self.forward_tokens(tape, store, grid.tokens, mode)
    }

    /// Attention layers and aggregation over already-computed tokens.
    pub fn forward_tokens(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        tokens: Var,
        mut mode: MaskMode<'_, F>,
    ) -> Result<TrunkOutput<F>> {
        let n = tape.shape(tokens)[0];
        if let MaskMode::Forced(f) = &mode {
            if f.layers.len() != self.layers.len() {
                return Err(Error::shape("forced masks", &[f.layers.len()], &[self.layers.len()]));
            }
        }
        if !self.masked && matches!(mode, MaskMode::Train(_) | MaskMode::Relaxed(_) | MaskMode::Eval) {
            mode = MaskMode::Dense;
        }
        let tau = self.config.temperature;
        let mut x = tokens;
        let mut layer_masks = Vec::new();
        let mut mask_vars = Vec::new();
        let mut records = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let mask = if mode.is_dense() {
                None
            } else {
                let logits = match layer.mask_logits(tape, store, x)? {
                    Some(v) => v,
                    None => tape.leaf(Tensor::zeros([n, n])),
                };
                let forced = match &mode {
                    MaskMode::Forced(f) => Some(&f.layers[l]),
                    _ => None,
                };
                let (var, lm) = realize_mask(tape, logits, &mut mode, tau, forced)?;
                layer_masks.push(lm);
                mask_vars.push(var);
                Some(var)
            };
            let (out, p) = layer.forward(tape, store, x, mask)?;
            records.push(LayerRecord {
                attention: tape.value(p).clone(),
                mask: mask.map_or_else(|| Tensor::ones([n, n]), |m| tape.value(m).clone()),
            });
            x = out;
        }
        let (out_mask, out_lm) = if mode.is_dense() {
            (None, None)
        } else {
            let logits = match self.aggregator.mask_logits(tape, store, x)? {
                Some(v) => v,
                None => tape.leaf(Tensor::zeros([1, n])),
            };
            let forced = match &mode {
                MaskMode::Forced(f) => Some(&f.output),
                _ => None,
            };
            let (var, lm) = realize_mask(tape, logits, &mut mode, tau, forced)?;
            (Some(var), Some(lm))
        };
        let (features, p) = self.aggregator.forward(tape, store, x, out_mask)?;
        let output_record = LayerRecord {
            attention: tape.value(p).clone(),
            mask: out_mask.map_or_else(|| Tensor::ones([1, n]), |m| tape.value(m).clone()),
        };
        let (masks, vars) = match (out_lm, out_mask) {
            (Some(output), Some(ov)) => (
                Some(MaskSet {
                    layers: layer_masks,
                    output,
                    temperature: tau,
                }),
                Some(MaskVars {
                    layers: mask_vars,
                    output: ov,
                }),
            ),
            _ => (None, None),
        };
        Ok(TrunkOutput {
            features,
            tokens,
            masks,
            mask_vars: vars,
            records: AttnRecords {
                layers: records,
                output: output_record,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn saturated_logits_always_unmask() {
        let logits = Tensor::<f64>::full([4, 4], 1e6);
        let mut rng = stream(1, &[]);
        for _ in 0..100 {
            let g = logistic_noise(&[4, 4], &mut rng);
            let m = sample_mask(&logits, Some(&g), 1.0).unwrap();
            assert!(m.hard.data().iter().all(|&h| h == 1.0));
        }
    }

    #[test]
    fn zero_logit_eval_is_masked_by_strict_threshold() {
        let m = sample_mask(&Tensor::<f64>::zeros([1, 1]), None, 1.0).unwrap();
        assert_eq!(m.soft.item(), 0.5);
        assert_eq!(m.hard.item(), 0.0);
    }

    #[test]
    fn nonpositive_temperature_rejected() {
        let l = Tensor::<f64>::zeros([1, 1]);
        assert!(matches!(sample_mask(&l, None, 0.0), Err(Error::Config(_))));
        let cfg = AttentionConfig {
            temperature: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hard_is_threshold_of_soft_in_training() {
        let mut rng = stream(3, &[]);
        let logits = Tensor::from_fn([5, 5], |i| ((i as f64) - 12.0) * 0.3);
        let g = logistic_noise(&[5, 5], &mut rng);
        let m = sample_mask(&logits, Some(&g), 1.0).unwrap();
        for (&s, &h) in m.soft.data().iter().zip(m.hard.data()) {
            assert!(s > 0.0 && s < 1.0);
            assert_eq!(h, if s > 0.5 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn identity_mask_with_flat_scores_returns_values() {
        // scores all zero, mask = I: each token attends only to itself
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(Tensor::zeros([2, 2]));
        let m = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let v = tape.leaf(t(&[2, 3], &[1., 2., 3., -4., 5., 0.5]));
        let p = tape.masked_softmax_rows(s, m).unwrap();
        let h = tape.matmul(p, v).unwrap();
        assert_eq!(tape.value(h), tape.value(v));
    }

    fn layer_store(masked: bool) -> (ParamStore<f64>, AttentionLayer) {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(&mut store, "l", 8, &AttentionConfig::default(), masked, &mut stream(5, &[]));
        (store, layer)
    }

    #[test]
    fn all_ones_mask_matches_softmax_attention() {
        let (store, layer) = layer_store(true);
        let x = Tensor::from_fn([5, 8], |i| ((i * 37 % 11) as f64 - 5.0) * 0.2);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let ones = tape.leaf(Tensor::ones([5, 5]));
        let (a, _) = layer.forward(&mut tape, &store, xv, Some(ones)).unwrap();
        let (b, _) = layer.forward(&mut tape, &store, xv, None).unwrap();
        for (p, q) in tape.value(a).data().iter().zip(tape.value(b).data()) {
            assert!((p - q).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_mask_row_keeps_token_local() {
        let (store, layer) = layer_store(false);
        let x = Tensor::from_fn([3, 8], |i| ((i * 13 % 7) as f64 - 3.0) * 0.4);
        let mut mask = Tensor::<f64>::ones([3, 3]);
        mask.data_mut()[..3].iter_mut().for_each(|m| *m = 0.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let mv = tape.leaf(mask);
        let (out, p) = layer.forward(&mut tape, &store, xv, Some(mv)).unwrap();
        assert_eq!(&tape.value(p).data()[..3], &[0.0; 3]);
        // row 0 must equal norm+ffn of the token alone
        let mut solo = Tape::new();
        let x0 = solo.leaf(Tensor::new([1, 8], x.data()[..8].to_vec()).unwrap());
        let x1 = layer.norm.forward(&mut solo, &store, x0).unwrap();
        let f = layer.ff1.forward(&mut solo, &store, x1).unwrap();
        let f = solo.relu(f).unwrap();
        let f = layer.ff2.forward(&mut solo, &store, f).unwrap();
        let y = solo.add(x1, f).unwrap();
        assert_eq!(&tape.value(out).data()[..8], solo.value(y).data());
    }

    #[test]
    fn aggregate_uniform_and_one_hot() {
        let mut store = ParamStore::<f64>::new();
        let agg = Aggregator::new(&mut store, "agg", 4, &AttentionConfig::default(), false, &mut stream(2, &[]));
        // zero query gives uniform scores
        let qshape = store.value(agg.query).shape().to_vec();
        store.set_value(agg.query, Tensor::zeros(qshape)).unwrap();
        let x = Tensor::from_fn([3, 4], |i| i as f64 * 0.1 - 0.4);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.param(&store, agg.wv);
        let v = tape.matmul(xv, wv).unwrap();
        let vv = tape.value(v).clone();
        let ones = tape.leaf(Tensor::ones([1, 3]));
        let (f, _) = agg.forward(&mut tape, &store, xv, Some(ones)).unwrap();
        for j in 0..4 {
            let mean = (0..3).map(|i| vv.at2(i, j)).sum::<f64>() / 3.0;
            assert!((tape.value(f).data()[j] - mean).abs() < 1e-12);
        }
        let hot = tape.leaf(t(&[1, 3], &[0., 1., 0.]));
        let (f, _) = agg.forward(&mut tape, &store, xv, Some(hot)).unwrap();
        for j in 0..4 {
            assert_eq!(tape.value(f).data()[j], vv.at2(1, j));
        }
        let none = tape.leaf(Tensor::zeros([1, 3]));
        let (f, _) = agg.forward(&mut tape, &store, xv, Some(none)).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    fn trunk(layers: usize, masked: bool) -> (ParamStore<f64>, Trunk<f64>) {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig {
            layers,
            ..Default::default()
        };
        let trunk = Trunk::new(&mut store, "trunk", TokenizerConfig::default(), cfg, masked, &mut stream(11, &[])).unwrap();
        (store, trunk)
    }

    fn obs() -> Tensor<f64> {
        Tensor::from_fn([4, 16, 16], |i| ((i * 7919) % 101) as f64 / 101.0)
    }

    #[test]
    fn zero_depth_trunk_aggregates_tokens_directly() {
        let (store, trunk) = trunk(0, false);
        let mut tape = Tape::new();
        let o = tape.leaf(obs());
        let out = trunk.forward(&mut tape, &store, o, MaskMode::Dense).unwrap();
        let (f, _) = trunk.aggregator.forward(&mut tape, &store, out.tokens, None).unwrap();
        assert_eq!(tape.value(out.features), tape.value(f));
    }

    #[test]
    fn forced_ones_equal_dense_trunk() {
        let (store, trunk) = trunk(2, true);
        let n = trunk.num_tokens();
        let ones = ForcedMasks::ones(n, 2);
        let mut tape = Tape::new();
        let o = tape.leaf(obs());
        let a = trunk.forward(&mut tape, &store, o, MaskMode::Forced(&ones)).unwrap();
        let b = trunk.forward(&mut tape, &store, o, MaskMode::Dense).unwrap();
        for (p, q) in tape.value(a.features).data().iter().zip(tape.value(b.features).data()) {
            assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn fixed_stream_is_bit_identical() {
        let (store, trunk) = trunk(2, true);
        let run = || {
            let mut tape = Tape::new();
            let o = tape.leaf(obs());
            let mut rng = stream(99, &[1]);
            let out = trunk.forward(&mut tape, &store, o, MaskMode::Train(&mut rng)).unwrap();
            (tape.value(out.features).clone(), out.masks.unwrap())
        };
        let (f1, m1) = run();
        let (f2, m2) = run();
        assert_eq!(f1, f2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn no_nan_for_any_mask_pattern() {
        let (store, trunk) = trunk(2, true);
        let n = trunk.num_tokens();
        for forced in [ForcedMasks::zeros(n, 2), ForcedMasks::ones(n, 2)] {
            let mut tape = Tape::new();
            let o = tape.leaf(obs());
            let out = trunk.forward(&mut tape, &store, o, MaskMode::Forced(&forced)).unwrap();
            assert!(tape.value(out.features).all_finite());
        }
    }
}
