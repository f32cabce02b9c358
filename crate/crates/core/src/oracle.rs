//! Exact checks against independent brute-force oracles: path enumeration,
//! the path maximum, level validators, influence blocking and unmask
//! equivalence.

use std::sync::Arc;

use rand::Rng;

use crate::attention::{AttentionConfig, ForcedMasks, MaskMode, Trunk};
use crate::autodiff::Tape;
use crate::env::dodge::{optimal_actions, optimal_values, DodgeLevel, COLLECT_REWARD};
use crate::env::maze::{count_simple_paths, is_perfect, MazeLevel};
use crate::env::{EnvState, LevelSpec};
use crate::error::Result;
use crate::params::ParamStore;
use crate::paths::{effective_input_relevance, max_paths, path_matrix};
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::tokenizer::TokenizerConfig;

/// Counts input→output paths by walking the layered graph edge by edge.
///
/// Node `(l, i)` is token `i` after layer `l`. Between layers there is a
/// residual edge `(l-1, i) → (l, i)` and an attention edge `(l-1, j) → (l, i)`
/// for every `layers[l][i][j] = 1`; both exist for `i = j`. The output node is
/// fed by `(L, j)` when `output[j] = 1`.
pub fn enumerate_paths(layers: &[Vec<Vec<bool>>], output: &[bool]) -> u64 {
    fn walk(layers: &[Vec<Vec<bool>>], output: &[bool], l: usize, i: usize) -> u64 {
        if l == layers.len() {
            return output[i] as u64;
        }
        let m = &layers[l];
        // residual edge
        let mut count = walk(layers, output, l + 1, i);
        for (k, row) in m.iter().enumerate() {
            if row[i] {
                count += walk(layers, output, l + 1, k);
            }
        }
        count
    }
    (0..output.len()).map(|i| walk(layers, output, 0, i)).sum()
}

fn to_tensor(m: &[Vec<bool>]) -> Result<Tensor<f64>> {
    let data: Vec<f64> = m.iter().flatten().map(|&b| b as u8 as f64).collect();
    Tensor::new([m.len(), m.first().map_or(0, Vec::len)], data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    pub detail: String,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.trials > 0
    }
}

/// Random binary patterns with `n ≤ 4`, `L ≤ 3`, compared exactly.
pub fn path_enumeration(patterns: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, &[0x0A]);
    let mut failures = 0;
    let mut detail = String::new();
    for _ in 0..patterns {
        let n = rng.gen_range(1..=4);
        let l = rng.gen_range(0..=3);
        let density: f64 = rng.gen();
        let layers: Vec<Vec<Vec<bool>>> = (0..l)
            .map(|_| (0..n).map(|_| (0..n).map(|_| rng.gen_bool(density)).collect()).collect())
            .collect();
        let output: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
        let brute = enumerate_paths(&layers, &output);
        let ts = layers.iter().map(|m| to_tensor(m)).collect::<Result<Vec<_>>>()?;
        let pm = path_matrix(&ts, &to_tensor(&[output.clone()])?)?;
        if pm.total != brute as f64 {
            failures += 1;
            if detail.is_empty() {
                detail = format!("n={n} L={l}: matrix {} vs enumeration {brute}", pm.total);
            }
        }
    }
    Ok(CheckOutcome {
        name: "path_enumeration",
        trials: patterns,
        failures,
        detail,
    })
}

/// All-ones totals against `n (n+1)^L` for `n ∈ 1..=8`, `L ∈ 0..=4`, with the
/// enumeration as a third route.
pub fn path_maximum() -> Result<CheckOutcome> {
    let (mut trials, mut failures) = (0, 0);
    let mut detail = String::new();
    for n in 1..=8usize {
        for l in 0..=4usize {
            trials += 1;
            let closed = (n * (n + 1).pow(l as u32)) as u64;
            let ones = vec![vec![vec![true; n]; n]; l];
            let brute = enumerate_paths(&ones, &vec![true; n]);
            let pm = path_matrix(&vec![Tensor::<f64>::ones([n, n]); l], &Tensor::ones([1, n]))?;
            if brute != closed || pm.total != closed as f64 || max_paths(n, l) != closed as f64 {
                failures += 1;
                if detail.is_empty() {
                    detail = format!("n={n} L={l}: closed {closed}, enumeration {brute}, matrix {}", pm.total);
                }
            }
        }
    }
    Ok(CheckOutcome {
        name: "path_maximum",
        trials,
        failures,
        detail,
    })
}

/// Replays the optimal plan of each level through the environment and
/// requires a collision-free collection.
pub fn dodge_levels(seeds: std::ops::Range<u64>) -> Result<CheckOutcome> {
    let (mut trials, mut failures) = (0, 0);
    let mut detail = String::new();
    for seed in seeds {
        trials += 1;
        let level = DodgeLevel::generate(seed);
        let ok = !level.emitters.is_empty() && replay_collects(&level)?;
        if !ok {
            failures += 1;
            if detail.is_empty() {
                detail = format!("seed {seed} has no safe collecting route");
            }
        }
    }
    Ok(CheckOutcome {
        name: "dodge_levels",
        trials,
        failures,
        detail,
    })
}

fn replay_collects(level: &DodgeLevel) -> Result<bool> {
    let v = optimal_values(level);
    let mut env = EnvState::new(Arc::new(LevelSpec::Dodge(level.clone())));
    while !env.done {
        let a = optimal_actions(level, &v, env.agent, env.t)[0];
        if env.step(a)?.reward >= COLLECT_REWARD {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Every layout is a spanning tree with a single start→goal route.
pub fn maze_levels(seeds: std::ops::Range<u64>) -> Result<CheckOutcome> {
    let (mut trials, mut failures) = (0, 0);
    let mut detail = String::new();
    for seed in seeds {
        trials += 1;
        let l = MazeLevel::generate(seed);
        if !is_perfect(&l.walls) || count_simple_paths(&l.walls, l.start, l.goal) != 1 {
            failures += 1;
            if detail.is_empty() {
                detail = format!("seed {seed} is not a perfect maze");
            }
        }
    }
    Ok(CheckOutcome {
        name: "maze_levels",
        trials,
        failures,
        detail,
    })
}

fn small_trunk(layers: usize, beta: f64, seed: u64) -> Result<(Trunk<f64>, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let cfg = AttentionConfig {
        layers,
        beta_init: beta,
        ..AttentionConfig::default()
    };
    let mut rng = stream(seed, &[0x0B]);
    let trunk = Trunk::new(&mut store, "trunk", TokenizerConfig::default(), cfg, true, &mut rng)?;
    Ok((trunk, store))
}

fn features(trunk: &Trunk<f64>, store: &ParamStore<f64>, tokens: &Tensor<f64>, mode: MaskMode<'_, f64>) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let t = tape.leaf(tokens.clone());
    let out = trunk.forward_tokens(&mut tape, store, t, mode)?;
    Ok(tape.value(out.features).data().to_vec())
}

/// Eval masks are computed once from the unperturbed tokens and held fixed;
/// perturbing any token with `A_out_i = 0` must leave the output bit-for-bit
/// unchanged. Draws with no blocked token are redrawn.
pub fn influence_blocking(trials: usize, seed: u64) -> Result<CheckOutcome> {
    let mut failures = 0;
    let mut detail = String::new();
    let mut done = 0;
    let mut draw = 0u64;
    let mut blocked_seen = 0;
    while done < trials {
        draw += 1;
        let mut rng = stream(seed, &[0x0C, draw]);
        let layers = rng.gen_range(1..=2);
        let (trunk, store) = small_trunk(layers, rng.gen_range(-2.0..1.0), rng.gen())?;
        let n = trunk.num_tokens();
        let d = trunk.tokenizer.token_dim();
        let tokens = Tensor::from_fn([n, d], |_| rng.gen_range(-1.0..1.0));
        let mut tape = Tape::new();
        let t = tape.leaf(tokens.clone());
        let out = trunk.forward_tokens(&mut tape, &store, t, MaskMode::Eval)?;
        let Some(masks) = out.masks else { continue };
        let base = tape.value(out.features).data().to_vec();
        let forced = masks.forced();
        let pm = path_matrix(&forced.layers, &forced.output)?;
        let blocked: Vec<usize> = effective_input_relevance(&pm)
            .iter()
            .enumerate()
            .filter(|(_, &r)| !r)
            .map(|(i, _)| i)
            .collect();
        if blocked.is_empty() {
            continue;
        }
        done += 1;
        blocked_seen += blocked.len();
        if features(&trunk, &store, &tokens, MaskMode::Forced(&forced))? != base {
            failures += 1;
            detail = "forced replay of eval masks differs from eval pass".into();
            continue;
        }
        for &i in &blocked {
            let mut perturbed = tokens.clone();
            let scale = rng.gen_range(1.0..100.0);
            for v in &mut perturbed.data_mut()[i * d..(i + 1) * d] {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
            if features(&trunk, &store, &perturbed, MaskMode::Forced(&forced))? != base {
                failures += 1;
                if detail.is_empty() {
                    detail = format!("draw {draw}: blocked token {i} changed the output");
                }
                break;
            }
        }
    }
    Ok(CheckOutcome {
        name: "influence_blocking",
        trials,
        failures,
        detail: if detail.is_empty() {
            format!("{blocked_seen} blocked tokens perturbed over {draw} draws")
        } else {
            detail
        },
    })
}

/// All-ones forced masks against the plain softmax path of the same trunk;
/// returns the outcome and the largest absolute difference seen.
pub fn unmask_equivalence(trials: usize, seed: u64, tol: f64) -> Result<(CheckOutcome, f64)> {
    let (mut failures, mut worst) = (0, 0.0f64);
    for trial in 0..trials {
        let mut rng = stream(seed, &[0x0D, trial as u64]);
        let layers = rng.gen_range(1..=3);
        let (trunk, store) = small_trunk(layers, rng.gen_range(-3.0..3.0), rng.gen())?;
        let n = trunk.num_tokens();
        let tokens = Tensor::from_fn([n, trunk.tokenizer.token_dim()], |_| rng.gen_range(-2.0..2.0));
        let ones = ForcedMasks::ones(n, layers);
        let a = features(&trunk, &store, &tokens, MaskMode::Forced(&ones))?;
        let b = features(&trunk, &store, &tokens, MaskMode::Dense)?;
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        if !(diff <= tol) {
            failures += 1;
        }
    }
    let outcome = CheckOutcome {
        name: "unmask_equivalence",
        trials,
        failures,
        detail: format!("max abs diff {worst:.3e}"),
    };
    Ok((outcome, worst))
}

/// Everything run by the `oracle` command.
pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        path_enumeration(10_000, seed)?,
        path_maximum()?,
        dodge_levels(0..1000)?,
        maze_levels(0..1000)?,
        influence_blocking(100, seed)?,
        unmask_equivalence(100, seed, 1e-6)?.0,
    ])
}

pub fn render(outcomes: &[CheckOutcome]) -> String {
    let mut out = String::new();
    for o in outcomes {
        out.push_str(&format!(
            "{:<20} {:>6} trials {:>4} failures  {}  {}\n",
            o.name,
            o.trials,
            o.failures,
            if o.passed() { "ok  " } else { "FAIL" },
            o.detail
        ));
    }
    out
}
