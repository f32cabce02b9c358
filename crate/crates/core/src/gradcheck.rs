//! Finite-difference verification of every backward rule at 64-bit.
//!
//! Each case draws a random instance, flattens all differentiable inputs
//! (including parameters) into one vector `x`, and compares the tape
//! gradient of a random scalar projection of the outputs with central
//! differences. The error of an instance is
//! `‖g_tape − g_fd‖ / max(‖g_tape‖, ‖g_fd‖, 1e-6)` over the checked
//! coordinates. Large instances check a random subset of coordinates.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::Rng;

use crate::attention::{AttentionConfig, AttentionLayer, Aggregator, MaskMode, MaskVars, Trunk};
use crate::autodiff::{Fault, Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::paths::{mask_loss_var, max_paths, path_total_var};
use crate::policy::{Policy, PolicyConfig, PolicyKind};
use crate::rng::{stream, StreamRng};
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerConfig;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const NORM_FLOOR: f64 = 1e-6;
/// Redraws allowed per instance when a failing instance sits on a kink.
const MAX_REDRAWS: usize = 10;

/// Loss at `x`; with `true`, also the tape gradient w.r.t. `x`.
type Objective = Box<dyn FnMut(&[f64], bool) -> Result<(f64, Vec<f64>)>>;

pub struct Instance {
    pub x: Vec<f64>,
    /// Coordinates to check; `None` checks all.
    pub coords: Option<Vec<usize>>,
    objective: Objective,
}

type Builder = fn(&mut StreamRng, Option<Fault>) -> Result<Instance>;

pub struct Case {
    pub name: &'static str,
    build: Builder,
}

pub const CASES: [Case; 16] = [
    Case { name: "matmul", build: matmul_case },
    Case { name: "elementwise", build: elementwise_case },
    Case { name: "unary", build: unary_case },
    Case { name: "reshape_reduce", build: reshape_reduce_case },
    Case { name: "softmax", build: softmax_case },
    Case { name: "masked_softmax", build: masked_softmax_case },
    Case { name: "layer_norm", build: layer_norm_case },
    Case { name: "conv2d", build: conv2d_case },
    Case { name: "straight_through", build: straight_through_case },
    Case { name: "masked_attention", build: masked_attention_case },
    Case { name: "path_loss", build: path_loss_case },
    Case { name: "masked_trunk", build: masked_trunk_case },
    Case { name: "policy_cnn", build: |r, f| policy_case(PolicyKind::Cnn, r, f) },
    Case { name: "policy_attention", build: |r, f| policy_case(PolicyKind::Attention, r, f) },
    Case { name: "policy_input_masked", build: |r, f| policy_case(PolicyKind::InputMasked, r, f) },
    Case { name: "policy_sparse_masked", build: |r, f| policy_case(PolicyKind::SparseMasked, r, f) },
];

#[derive(Clone, Debug)]
pub struct Options {
    pub instances: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
    /// Restricts the run to cases whose name is listed (all when empty).
    pub only: Vec<String>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            instances: 100,
            seed: 0,
            fault: None,
            only: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub failures: usize,
    pub worst: f64,
    /// Instances redrawn because they straddled a non-differentiable point.
    pub redraws: usize,
    pub elapsed: Duration,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.worst < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub ops: Vec<OpReport>,
    pub elapsed: Duration,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(OpReport::passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<22} {:>9} {:>8} {:>12} {:>7} {:>8}  status\n",
            "op", "instances", "failures", "worst_rel", "redraws", "secs"
        );
        for r in &self.ops {
            out.push_str(&format!(
                "{:<22} {:>9} {:>8} {:>12.3e} {:>7} {:>8.2}  {}\n",
                r.op,
                r.instances,
                r.failures,
                r.worst,
                r.redraws,
                r.elapsed.as_secs_f64(),
                if r.passed() { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!("total {:.1}s\n", self.elapsed.as_secs_f64()));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Check {
    pub rel_error: f64,
    /// One-sided differences disagree: the step crossed a kink.
    pub kink: bool,
}

/// `|right - left|` one-sided slope gap at coordinate `j` with step `h`.
fn slope_gap(inst: &mut Instance, x: &mut [f64], j: usize, f0: f64, h: f64) -> Result<f64> {
    let orig = x[j];
    x[j] = orig + h;
    let fp = (inst.objective)(x, false)?.0;
    x[j] = orig - h;
    let fm = (inst.objective)(x, false)?.0;
    x[j] = orig;
    Ok(((fp - f0) / h - (f0 - fm) / h).abs())
}

/// Compares tape and central-difference gradients for one instance.
///
/// A failing instance is flagged as a kink when some coordinate's one-sided
/// slope gap does not shrink tenfold with a tenfold smaller step, as it does
/// wherever the function is twice differentiable.
pub fn check_instance(inst: &mut Instance) -> Result<Check> {
    let (f0, g) = (inst.objective)(&inst.x, true)?;
    let coords: Vec<usize> = inst.coords.clone().unwrap_or_else(|| (0..inst.x.len()).collect());
    let mut x = inst.x.clone();
    let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
    let mut gaps = Vec::with_capacity(coords.len());
    for &j in &coords {
        let orig = x[j];
        x[j] = orig + FD_STEP;
        let fp = (inst.objective)(&x, false)?.0;
        x[j] = orig - FD_STEP;
        let fm = (inst.objective)(&x, false)?.0;
        x[j] = orig;
        let fd = (fp - fm) / (2.0 * FD_STEP);
        gaps.push(((((fp - f0) - (f0 - fm)) / FD_STEP).abs(), fd.abs().max(1.0)));
        diff += (g[j] - fd).powi(2);
        na += g[j].powi(2);
        nf += fd.powi(2);
    }
    let rel_error = diff.sqrt() / na.sqrt().max(nf.sqrt()).max(NORM_FLOOR);
    let mut kink = false;
    if !(rel_error < TOLERANCE) {
        for (&j, &(gap, scale)) in coords.iter().zip(&gaps) {
            if gap <= 1e-6 * scale {
                continue;
            }
            let fine = slope_gap(inst, &mut x, j, f0, FD_STEP / 10.0)?;
            if !(0.05 * gap..=0.2 * gap).contains(&fine) {
                kink = true;
                break;
            }
        }
    }
    Ok(Check { rel_error, kink })
}

pub fn run(opts: &Options) -> Result<Report> {
    let start = Instant::now();
    let mut ops = Vec::new();
    for (ci, case) in CASES.iter().enumerate() {
        if !opts.only.is_empty() && !opts.only.iter().any(|o| o == case.name) {
            continue;
        }
        let t0 = Instant::now();
        let (mut worst, mut failures, mut redraws) = (0.0f64, 0, 0);
        for i in 0..opts.instances {
            for attempt in 0..=MAX_REDRAWS {
                let mut rng = stream(opts.seed, &[0x6C, ci as u64, i as u64, attempt as u64]);
                let mut inst = (case.build)(&mut rng, opts.fault)?;
                let c = check_instance(&mut inst)?;
                if c.rel_error >= TOLERANCE && c.kink && attempt < MAX_REDRAWS {
                    redraws += 1;
                    continue;
                }
                worst = worst.max(c.rel_error);
                if !(c.rel_error < TOLERANCE) {
                    failures += 1;
                }
                break;
            }
        }
        ops.push(OpReport {
            op: case.name,
            instances: opts.instances,
            failures,
            worst,
            redraws,
            elapsed: t0.elapsed(),
        });
    }
    Ok(Report {
        ops,
        elapsed: start.elapsed(),
    })
}

fn new_tape(fault: Option<Fault>) -> Tape<f64> {
    let mut tape = Tape::new();
    if let Some(f) = fault {
        tape.inject_fault(f);
    }
    tape
}

fn rand_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Hands out consecutive slices of `x` as tape leaves and later gathers their
/// gradients in the same order.
struct Leaves<'a> {
    x: &'a [f64],
    pos: usize,
    vars: Vec<Var>,
}

impl<'a> Leaves<'a> {
    fn new(x: &'a [f64]) -> Self {
        Leaves { x, pos: 0, vars: Vec::new() }
    }

    fn take(&mut self, tape: &mut Tape<f64>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape.to_vec(), self.x[self.pos..self.pos + n].to_vec())?;
        self.pos += n;
        let v = tape.leaf(t);
        self.vars.push(v);
        Ok(v)
    }

    fn finish(self, tape: &Tape<f64>, loss: Var, grad: bool) -> Result<(f64, Vec<f64>)> {
        let value = tape.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = tape.gradients(loss)?;
        let g = self.vars.iter().flat_map(|&v| grads.wrt(v).data().to_vec()).collect();
        Ok((value, g))
    }
}

/// `Σ w⊙y + ½(Σ v⊙y)²` with `w`, `v` drawn from `seed` and `y`'s size.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = stream(seed, &[n as u64]);
    let w = tape.leaf(Tensor::new(shape.clone(), rand_vec(&mut rng, n, -1.0, 1.0))?);
    let v = tape.leaf(Tensor::new(shape, rand_vec(&mut rng, n, -1.0, 1.0))?);
    let wy = tape.mul(w, y)?;
    let lin = tape.sum(wy)?;
    let vy = tape.mul(v, y)?;
    let s = tape.sum(vy)?;
    let sq = tape.square(s)?;
    let half = tape.scale(sq, 0.5)?;
    tape.add(lin, half)
}

fn add_all(tape: &mut Tape<f64>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn matmul_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let (m, k, n) = (rng.gen_range(1..=5), rng.gen_range(1..=5), rng.gen_range(1..=5));
    let seed: u64 = rng.gen();
    Ok(Instance {
        x: rand_vec(rng, m * k + k * n, -1.0, 1.0),
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let a = l.take(&mut tape, &[m, k])?;
            let b = l.take(&mut tape, &[k, n])?;
            let y = tape.matmul(a, b)?;
            let loss = project(&mut tape, y, seed)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

fn elementwise_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let n = rng.gen_range(1..=8);
    let seed: u64 = rng.gen();
    let mut x = rand_vec(rng, n, -1.0, 1.0);
    // denominators bounded away from zero
    x.extend((0..n).map(|_| rng.gen_range(0.5..2.0) * if rng.gen() { 1.0 } else { -1.0 }));
    let s = rng.gen_range(-2.0..2.0);
    Ok(Instance {
        x,
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let a = l.take(&mut tape, &[n])?;
            let b = l.take(&mut tape, &[n])?;
            let ys = [
                tape.add(a, b)?,
                tape.sub(a, b)?,
                tape.mul(a, b)?,
                tape.div(a, b)?,
                tape.div_guarded(a, b)?,
                tape.minimum(a, b)?,
                tape.clamp(a, -0.5, 0.5)?,
                tape.scale(a, s)?,
            ];
            let terms = ys
                .iter()
                .enumerate()
                .map(|(i, &y)| project(&mut tape, y, seed + i as u64))
                .collect::<Result<Vec<_>>>()?;
            let loss = add_all(&mut tape, &terms)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

fn unary_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let n = rng.gen_range(1..=8);
    let seed: u64 = rng.gen();
    let mut x = rand_vec(rng, n, -2.0, 2.0);
    x.extend(rand_vec(rng, n, 0.2, 3.0));
    Ok(Instance {
        x,
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let a = l.take(&mut tape, &[n])?;
            let p = l.take(&mut tape, &[n])?;
            let ys = [
                tape.neg(a)?,
                tape.exp(a)?,
                tape.log(p)?,
                tape.sigmoid(a)?,
                tape.tanh(a)?,
                tape.relu(a)?,
                tape.square(a)?,
            ];
            let terms = ys
                .iter()
                .enumerate()
                .map(|(i, &y)| project(&mut tape, y, seed + i as u64))
                .collect::<Result<Vec<_>>>()?;
            let loss = add_all(&mut tape, &terms)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

fn reshape_reduce_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let (m, n) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
    let seed: u64 = rng.gen();
    let idx = rng.gen_range(0..m * n);
    let rows = rng.gen_range(1..=3);
    Ok(Instance {
        x: rand_vec(rng, m * n + 2 * n, -1.0, 1.0),
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let a = l.take(&mut tape, &[m, n])?;
            let v = l.take(&mut tape, &[n])?;
            let bias = l.take(&mut tape, &[n])?;
            let t = tape.transpose(a)?;
            let r = tape.reshape(a, [m * n])?;
            let s = tape.sum(a)?;
            let mean = tape.mean(a)?;
            let sq = tape.square(s)?;
            let p = tape.pick(a, idx)?;
            let b = tape.broadcast_rows(v, rows)?;
            let rb = tape.add_row_bias(a, bias)?;
            let ys = [t, r, sq, mean, p, b, rb];
            let terms = ys
                .iter()
                .enumerate()
                .map(|(i, &y)| project(&mut tape, y, seed + i as u64))
                .collect::<Result<Vec<_>>>()?;
            let loss = add_all(&mut tape, &terms)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

fn softmax_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let (m, n) = (rng.gen_range(1..=4), rng.gen_range(1..=6));
    let seed: u64 = rng.gen();
    Ok(Instance {
        x: rand_vec(rng, m * n, -3.0, 3.0),
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let a = l.take(&mut tape, &[m, n])?;
            let p = tape.softmax_rows(a)?;
            let lp = tape.log_softmax_rows(a)?;
            let t1 = project(&mut tape, p, seed)?;
            let t2 = project(&mut tape, lp, seed + 1)?;
            let loss = tape.add(t1, t2)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

fn masked_softmax_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let (m, n) = (rng.gen_range(1..=4), rng.gen_range(1..=6));
    let seed: u64 = rng.gen();
    // a fixed binary pattern with some soft (differentiable) entries in (0, 1)
    let pattern: Vec<u8> = (0..m * n).map(|_| rng.gen_range(0..3)).collect();
    let soft: Vec<usize> = (0..m * n).filter(|&i| pattern[i] == 2).collect();
    let mut x = rand_vec(rng, m * n, -3.0, 3.0);
    x.extend(rand_vec(rng, soft.len(), 0.05, 0.95));
    Ok(Instance {
        x,
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let s = l.take(&mut tape, &[m, n])?;
            let ms = l.take(&mut tape, &[soft.len()])?;
            // mask = fixed + scatter(soft values) via a 0/1 selection matrix
            let fixed: Vec<f64> = pattern.iter().map(|&p| if p == 1 { 1.0 } else { 0.0 }).collect();
            let fixed = tape.leaf(Tensor::new(vec![m * n], fixed)?);
            let mask = if soft.is_empty() {
                fixed
            } else {
                let mut sel = vec![0.0; soft.len() * m * n];
                for (k, &i) in soft.iter().enumerate() {
                    sel[k * m * n + i] = 1.0;
                }
                let sel = tape.leaf(Tensor::new(vec![soft.len(), m * n], sel)?);
                let row = tape.reshape(ms, [1, soft.len()])?;
                let scattered = tape.matmul(row, sel)?;
                let scattered = tape.reshape(scattered, [m * n])?;
                tape.add(fixed, scattered)?
            };
            let mask = tape.reshape(mask, [m, n])?;
            let p = tape.masked_softmax_rows(s, mask)?;
            let loss = project(&mut tape, p, seed)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

fn layer_norm_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let (m, n) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
    let seed: u64 = rng.gen();
    let mut x = rand_vec(rng, m * n, -2.0, 2.0);
    x.extend(rand_vec(rng, 2 * n, -1.5, 1.5));
    Ok(Instance {
        x,
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let a = l.take(&mut tape, &[m, n])?;
            let g = l.take(&mut tape, &[n])?;
            let b = l.take(&mut tape, &[n])?;
            let y = tape.layer_norm_rows(a, g, b)?;
            let loss = project(&mut tape, y, seed)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

fn conv2d_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let c = rng.gen_range(1..=3);
    let f = rng.gen_range(1..=3);
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let (oh, ow) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let (h, w) = (k + (oh - 1) * stride, k + (ow - 1) * stride);
    let up = rng.gen_range(1..=2);
    let seed: u64 = rng.gen();
    Ok(Instance {
        x: rand_vec(rng, c * h * w + f * c * k * k + f, -1.0, 1.0),
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let input = l.take(&mut tape, &[c, h, w])?;
            let kern = l.take(&mut tape, &[f, c, k, k])?;
            let bias = l.take(&mut tape, &[f])?;
            let y = tape.conv2d(input, kern, stride)?;
            let y = tape.channel_bias(y, bias)?;
            let y = tape.upsample_nearest(y, up)?;
            let loss = project(&mut tape, y, seed)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

/// Straight-through mask: the tape gradient must equal the derivative of
/// the soft path with the hard forward value held fixed, i.e. of
/// `L(hard₀ + soft(l) − soft(l₀))`.
fn straight_through_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let (m, n) = (rng.gen_range(1..=4), rng.gen_range(1..=5));
    let seed: u64 = rng.gen();
    let tau = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
    let noise: Tensor<f64> = crate::attention::logistic_noise(&[m, n], rng);
    let x0 = rand_vec(rng, m * n, -3.0, 3.0);
    let y = Tensor::new(vec![m, n], rand_vec(rng, m * n, -1.0, 1.0))?;
    let soft0: Vec<f64> = x0
        .iter()
        .zip(noise.data())
        .map(|(l, g)| crate::autodiff::sigmoid((l + g) / tau))
        .collect();
    let hard0: Vec<f64> = soft0.iter().map(|&s| if s > 0.5 { 1.0 } else { 0.0 }).collect();
    let offset = Tensor::new(vec![m, n], hard0.iter().zip(&soft0).map(|(h, s)| h - s).collect())?;
    let hard0 = Tensor::new(vec![m, n], hard0)?;
    Ok(Instance {
        x: x0,
        coords: None,
        objective: Box::new(move |x, grad| {
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let logits = l.take(&mut tape, &[m, n])?;
            let g = tape.leaf(noise.clone());
            let z = tape.add(logits, g)?;
            let z = tape.scale(z, 1.0 / tau)?;
            let soft = tape.sigmoid(z)?;
            let mask = if grad {
                tape.straight_through(hard0.clone(), soft)?
            } else {
                let off = tape.leaf(offset.clone());
                tape.add(off, soft)?
            };
            let yv = tape.leaf(y.clone());
            let my = tape.mul(mask, yv)?;
            let out = tape.tanh(my)?;
            let loss = project(&mut tape, out, seed)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

/// Parameters of a store flattened in id order.
fn flatten(store: &ParamStore<f64>) -> (Vec<ParamId>, Vec<f64>) {
    let ids: Vec<ParamId> = store.ids().collect();
    let x = ids.iter().flat_map(|&id| store.value(id).data().to_vec()).collect();
    (ids, x)
}

fn load(store: &mut ParamStore<f64>, ids: &[ParamId], x: &[f64]) -> usize {
    let mut pos = 0;
    for &id in ids {
        let d = store.value_mut(id).data_mut();
        let n = d.len();
        d.copy_from_slice(&x[pos..pos + n]);
        pos += n;
    }
    pos
}

fn param_grads(store: &ParamStore<f64>, ids: &[ParamId]) -> Vec<f64> {
    ids.iter().flat_map(|&id| store.grad(id).data().to_vec()).collect()
}

/// Soft relaxed mask `σ((logits + g)/τ)` with frozen noise `g`.
fn relaxed(tape: &mut Tape<f64>, logits: Var, noise: &Tensor<f64>, tau: f64) -> Result<Var> {
    let g = tape.leaf(noise.clone());
    let z = tape.add(logits, g)?;
    let z = tape.scale(z, 1.0 / tau)?;
    tape.sigmoid(z)
}

/// One masked attention layer plus masked aggregation, small widths, with
/// relaxed masks under frozen noise. Checks tokens and all parameters.
fn masked_attention_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let n = rng.gen_range(2..=5);
    let d = 8;
    let cfg = AttentionConfig {
        layers: 1,
        key_dim: 4,
        mask_dim: 3,
        ff_dim: 8,
        beta_init: rng.gen_range(-1.0..2.0),
        temperature: [0.5, 1.0, 2.0][rng.gen_range(0..3)],
    };
    let mut store = ParamStore::<f64>::new();
    let layer = AttentionLayer::new(&mut store, "l", d, &cfg, true, rng);
    let agg = Aggregator::new(&mut store, "agg", d, &cfg, true, rng);
    let (ids, params) = flatten(&store);
    let noise_l: Tensor<f64> = crate::attention::logistic_noise(&[n, n], rng);
    let noise_o: Tensor<f64> = crate::attention::logistic_noise(&[1, n], rng);
    let seed: u64 = rng.gen();
    let mut x = rand_vec(rng, n * d, -1.0, 1.0);
    x.extend(params);
    Ok(Instance {
        x,
        coords: None,
        objective: Box::new(move |x, grad| {
            load(&mut store, &ids, &x[n * d..]);
            store.zero_grad();
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(&x[..n * d]);
            let tokens = l.take(&mut tape, &[n, d])?;
            let logits = layer.mask_logits(&mut tape, &store, tokens)?.expect("masked layer");
            let m = relaxed(&mut tape, logits, &noise_l, cfg.temperature)?;
            let (h, _) = layer.forward(&mut tape, &store, tokens, Some(m))?;
            let lo = agg.mask_logits(&mut tape, &store, h)?.expect("masked aggregator");
            let mo = relaxed(&mut tape, lo, &noise_o, cfg.temperature)?;
            let (feat, _) = agg.forward(&mut tape, &store, h, Some(mo))?;
            let t1 = project(&mut tape, h, seed)?;
            let t2 = project(&mut tape, feat, seed + 1)?;
            let loss = tape.add(t1, t2)?;
            let value = tape.value(loss).item();
            if !grad {
                return Ok((value, Vec::new()));
            }
            let grads = tape.backward(loss, &mut store)?;
            let mut g = grads.wrt(tokens).data().to_vec();
            g.extend(param_grads(&store, &ids));
            Ok((value, g))
        }),
    })
}

/// Path total and mask loss as functions of soft mask values.
fn path_loss_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let n = rng.gen_range(1..=4);
    let layers = rng.gen_range(0..=3);
    let alpha = rng.gen_range(0.0..1.0);
    let seed = rng.gen::<u64>();
    Ok(Instance {
        x: rand_vec(rng, layers * n * n + n, 0.0, 1.0),
        coords: None,
        objective: Box::new(move |x, grad| {
            let _ = seed;
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(x);
            let ms = (0..layers)
                .map(|_| l.take(&mut tape, &[n, n]))
                .collect::<Result<Vec<_>>>()?;
            let out = l.take(&mut tape, &[1, n])?;
            let vars = MaskVars { layers: ms, output: out };
            let total = path_total_var(&mut tape, &vars)?;
            let ml = mask_loss_var(&mut tape, total, max_paths(n, layers), alpha)?;
            let t = tape.scale(total, 0.01)?;
            let loss = tape.add(ml, t)?;
            l.finish(&tape, loss, grad)
        }),
    })
}

/// Subset of coordinates: `k_in` from the first `n_in` entries, `k_p` from
/// the rest.
fn pick_coords(rng: &mut StreamRng, n_in: usize, n_total: usize, k_in: usize, k_p: usize) -> Vec<usize> {
    let mut c: Vec<usize> = sample(rng, n_in, k_in.min(n_in)).into_iter().collect();
    c.extend(sample(rng, n_total - n_in, k_p.min(n_total - n_in)).into_iter().map(|i| i + n_in));
    c
}

/// Full masked trunk (default widths) on random tokens, relaxed masks with a
/// frozen noise stream.
fn masked_trunk_case(rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let mut store = ParamStore::<f64>::new();
    let cfg = AttentionConfig {
        beta_init: rng.gen_range(-1.0..2.0),
        ..AttentionConfig::default()
    };
    let trunk = Trunk::new(&mut store, "trunk", TokenizerConfig::default(), cfg, true, rng)?;
    let (n, d) = (trunk.num_tokens(), trunk.tokenizer.token_dim());
    let (ids, params) = flatten(&store);
    let noise_seed: u64 = rng.gen();
    let seed: u64 = rng.gen();
    let mut x = rand_vec(rng, n * d, -1.0, 1.0);
    x.extend(params);
    let coords = pick_coords(rng, n * d, x.len(), 10, 30);
    Ok(Instance {
        x,
        coords: Some(coords),
        objective: Box::new(move |x, grad| {
            load(&mut store, &ids, &x[n * d..]);
            store.zero_grad();
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(&x[..n * d]);
            let tokens = l.take(&mut tape, &[n, d])?;
            let mut noise = stream(noise_seed, &[]);
            let out = trunk.forward_tokens(&mut tape, &store, tokens, MaskMode::Relaxed(&mut noise))?;
            let loss = project(&mut tape, out.features, seed)?;
            let value = tape.value(loss).item();
            if !grad {
                return Ok((value, Vec::new()));
            }
            let grads = tape.backward(loss, &mut store)?;
            let mut g = grads.wrt(tokens).data().to_vec();
            g.extend(param_grads(&store, &ids));
            Ok((value, g))
        }),
    })
}

/// Whole policy: logits, value and (sparse agent) mask loss, w.r.t. the
/// observation and every parameter.
fn policy_case(kind: PolicyKind, rng: &mut StreamRng, fault: Option<Fault>) -> Result<Instance> {
    let mut store = ParamStore::<f64>::new();
    let policy = Policy::new(PolicyConfig::new(kind), &mut store, rng)?;
    let (ids, params) = flatten(&store);
    let obs_len = 4 * 16 * 16;
    let noise_seed: u64 = rng.gen();
    let seed: u64 = rng.gen();
    let alpha = rng.gen_range(0.0..1.0);
    let mu = policy.trunk().map(|t| max_paths(t.num_tokens(), t.layers.len()));
    let mut x = rand_vec(rng, obs_len, 0.0, 1.0);
    x.extend(params);
    let coords = pick_coords(rng, obs_len, x.len(), 10, 30);
    Ok(Instance {
        x,
        coords: Some(coords),
        objective: Box::new(move |x, grad| {
            load(&mut store, &ids, &x[obs_len..]);
            store.zero_grad();
            let mut tape = new_tape(fault);
            let mut l = Leaves::new(&x[..obs_len]);
            let obs = l.take(&mut tape, &[4, 16, 16])?;
            let mut noise = stream(noise_seed, &[]);
            let out = policy.forward(&mut tape, &store, obs, MaskMode::Relaxed(&mut noise))?;
            let row = tape.reshape(out.logits, [1, crate::env::NUM_ACTIONS])?;
            let lp = tape.log_softmax_rows(row)?;
            let t1 = project(&mut tape, lp, seed)?;
            let t2 = project(&mut tape, out.value, seed + 1)?;
            let mut loss = tape.add(t1, t2)?;
            if let (Some(mu), Some(vars)) = (mu, out.aux.as_ref().and_then(|a| a.mask_vars.as_ref())) {
                let total = path_total_var(&mut tape, vars)?;
                let ml = mask_loss_var(&mut tape, total, mu, alpha)?;
                loss = tape.add(loss, ml)?;
            }
            let value = tape.value(loss).item();
            if !grad {
                return Ok((value, Vec::new()));
            }
            let grads = tape.backward(loss, &mut store)?;
            let mut g = grads.wrt(obs).data().to_vec();
            g.extend(param_grads(&store, &ids));
            Ok((value, g))
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(instances: usize, only: &[&str], fault: Option<Fault>) -> Options {
        Options {
            instances,
            seed: 3,
            fault,
            only: only.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn small_cases_pass() {
        let r = run(&opts(20, &["matmul", "softmax", "elementwise", "straight_through", "path_loss"], None)).unwrap();
        assert!(r.passed(), "{}", r.render());
        assert_eq!(r.ops.len(), 5);
    }

    #[test]
    fn injected_faults_are_detected() {
        let cases = [
            (Fault::MatMul, "matmul"),
            (Fault::Softmax, "softmax"),
            (Fault::MaskedSoftmax, "masked_softmax"),
            (Fault::Conv2d, "conv2d"),
            (Fault::StraightThrough, "straight_through"),
            (Fault::LayerNorm, "layer_norm"),
        ];
        for (fault, op) in cases {
            let r = run(&opts(5, &[op], Some(fault))).unwrap();
            assert!(!r.passed(), "{op} corruption went unnoticed");
        }
    }

    #[test]
    fn linear_function_has_tiny_error() {
        let mut inst = Instance {
            x: vec![0.3, -0.2],
            coords: None,
            objective: Box::new(|x, _| Ok((2.0 * x[0] - x[1], vec![2.0, -1.0]))),
        };
        let c = check_instance(&mut inst).unwrap();
        assert!(c.rel_error < 1e-9 && !c.kink);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut inst = Instance {
            x: vec![0.3],
            coords: None,
            objective: Box::new(|x, _| Ok((x[0] * x[0], vec![3.0 * x[0]]))),
        };
        assert!(check_instance(&mut inst).unwrap().rel_error > 0.1);
    }
}
