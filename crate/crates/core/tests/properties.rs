use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;

use smap_core::attention::{ForcedMasks, MaskMode};
use smap_core::config::ExperimentConfig;
use smap_core::env::{generate_level, Action, EnvKind, EnvState, NUM_ACTIONS};
use smap_core::eval::normalize_return;
use smap_core::oracle::enumerate_paths;
use smap_core::paths::path_matrix;
use smap_core::policy::{Policy, PolicyConfig, PolicyKind};
use smap_core::ppo::{compute_gae, ppo_update, BanditPolicy, PpoConfig, RolloutBatch};
use smap_core::rng::stream;
use smap_core::tokenizer::{Tokenizer, TokenizerConfig};
use smap_core::{Adam, ParamStore, Tape, Tensor};

fn mask_strategy(n: usize, layers: usize) -> impl Strategy<Value = (Vec<Vec<Vec<bool>>>, Vec<bool>)> {
    (
        proptest::collection::vec(proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), n), layers),
        proptest::collection::vec(any::<bool>(), n),
    )
}

fn sized_masks() -> impl Strategy<Value = (Vec<Vec<Vec<bool>>>, Vec<bool>)> {
    (1usize..=4, 0usize..=3).prop_flat_map(|(n, l)| mask_strategy(n, l))
}

fn tensors(layers: &[Vec<Vec<bool>>], out: &[bool]) -> (Vec<Tensor<f64>>, Tensor<f64>) {
    let t = |m: &[Vec<bool>]| {
        let data: Vec<f64> = m.iter().flatten().map(|&b| b as u8 as f64).collect();
        Tensor::new([m.len(), m[0].len()], data).unwrap()
    };
    (layers.iter().map(|m| t(m)).collect(), t(&[out.to_vec()]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn path_totals_match_enumeration((layers, out) in sized_masks()) {
        let (ls, o) = tensors(&layers, &out);
        let pm = path_matrix(&ls, &o).unwrap();
        prop_assert_eq!(pm.total, enumerate_paths(&layers, &out) as f64);
        prop_assert!(pm.total <= pm.mu);
    }

    #[test]
    fn opening_a_mask_entry_never_loses_paths(
        (layers, out) in sized_masks(),
        pick in any::<prop::sample::Index>(),
    ) {
        let (ls, o) = tensors(&layers, &out);
        let before = path_matrix(&ls, &o).unwrap().total;
        let n = out.len();
        let slots = layers.len() * n * n + n;
        let k = pick.index(slots);
        let (mut layers, mut out) = (layers, out);
        if k < layers.len() * n * n {
            layers[k / (n * n)][(k / n) % n][k % n] = true;
        } else {
            out[k - layers.len() * n * n] = true;
        }
        let (ls, o) = tensors(&layers, &out);
        prop_assert!(path_matrix(&ls, &o).unwrap().total >= before);
    }

    #[test]
    fn masked_softmax_is_finite_for_any_pattern(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in any::<u64>(),
        scale in 0.1f64..200.0,
    ) {
        let mut rng = stream(seed, &[]);
        let scores = Tensor::from_fn([rows, cols], |_| scale * rng.gen_range(-1.0..1.0));
        let mask = Tensor::from_fn([rows, cols], |_| rng.gen_range(0..2) as f64);
        let mut tape = Tape::<f64>::new();
        let s = tape.leaf(scores);
        let m = tape.leaf(mask.clone());
        let p = tape.masked_softmax_rows(s, m).unwrap();
        let total = tape.sum(p).unwrap();
        let g = tape.gradients(total).unwrap();
        prop_assert!(g.wrt(s).data().iter().all(|v| v.is_finite()));
        for r in 0..rows {
            let row = &tape.value(p).data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|v| v.is_finite()));
            let open = mask.data()[r * cols..(r + 1) * cols].iter().any(|&v| v > 0.0);
            let sum: f64 = row.iter().sum();
            let ok = if open { (sum - 1.0).abs() < 1e-12 } else { sum == 0.0 };
            prop_assert!(ok, "row sum {}", sum);
        }
    }

    #[test]
    fn backward_replay_is_identical(seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let mut store = ParamStore::<f64>::new();
        let policy = Policy::new(PolicyConfig::new(PolicyKind::SparseMasked), &mut store, &mut rng).unwrap();
        let obs = Tensor::from_fn([4, 16, 16], |_| rng.gen_range(0.0..1.0));
        let run = |store: &mut ParamStore<f64>| {
            store.zero_grad();
            let mut tape = Tape::new();
            let o = tape.leaf(obs.clone());
            let mut noise = stream(seed, &[1]);
            let out = policy.forward(&mut tape, store, o, MaskMode::Train(&mut noise)).unwrap();
            let loss = tape.sum(out.logits).unwrap();
            let loss = tape.add(loss, out.value).unwrap();
            tape.backward(loss, store).unwrap();
            let g: Vec<f64> = store.ids().flat_map(|id| store.grad(id).data().to_vec()).collect();
            (tape.value(loss).item(), g)
        };
        let a = run(&mut store);
        let b = run(&mut store);
        prop_assert_eq!(a.0.to_bits(), b.0.to_bits());
        prop_assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn pixels_outside_a_receptive_field_do_not_reach_its_token(
        seed in any::<u64>(),
        token in 0usize..16,
        y in 0usize..16,
        x in 0usize..16,
        ch in 0usize..4,
    ) {
        let cfg = TokenizerConfig::default();
        let fields = cfg.receptive_fields().unwrap();
        prop_assume!(!fields[token].contains(y, x));
        let mut rng = stream(seed, &[]);
        let mut store = ParamStore::<f64>::new();
        let tok = Tokenizer::new(&mut store, "tok", cfg, &mut rng).unwrap();
        let obs = Tensor::from_fn([4, 16, 16], |_| rng.gen_range(0.0..1.0));
        let tokens = |o: &Tensor<f64>| {
            let mut tape = Tape::new();
            let v = tape.leaf(o.clone());
            let g = tok.tokenize(&mut tape, &store, v).unwrap();
            tape.value(g.tokens).data().to_vec()
        };
        let mut moved = obs.clone();
        moved.data_mut()[ch * 256 + y * 16 + x] += 5.0;
        let d = tok.token_dim();
        prop_assert_eq!(&tokens(&obs)[token * d..(token + 1) * d], &tokens(&moved)[token * d..(token + 1) * d]);
    }

    #[test]
    fn episode_returns_stay_in_bounds(seed in 0u64..500, walk in any::<u64>(), maze in any::<bool>()) {
        let kind = if maze { EnvKind::Maze } else { EnvKind::Dodge };
        let mut env = EnvState::new(Arc::new(generate_level(kind, seed)));
        let mut rng = stream(walk, &[]);
        let mut total = 0.0;
        while !env.done {
            total += env.step(Action::from_index(rng.gen_range(0..NUM_ACTIONS))).unwrap().reward;
        }
        let (lo, hi) = kind.return_bounds();
        prop_assert!(total >= lo && total <= hi + 1e-9);
        if maze {
            prop_assert!(total == 0.0 || total == 10.0);
        }
    }

    #[test]
    fn normalization_is_affine_and_monotone(a in -5.0f64..30.0, b in -5.0f64..30.0) {
        for kind in [EnvKind::Dodge, EnvKind::Maze] {
            let (lo, hi) = kind.return_bounds();
            let (na, nb) = (normalize_return(a, kind).unwrap(), normalize_return(b, kind).unwrap());
            if a <= b {
                prop_assert!(na <= nb);
            }
            if (lo..=hi).contains(&a) {
                prop_assert!((na - (a - lo) / (hi - lo)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gae_telescopes_without_discounting(
        rewards in proptest::collection::vec(-2.0f64..2.0, 1..20),
        seed in any::<u64>(),
        last in -3.0f64..3.0,
    ) {
        let mut rng = stream(seed, &[]);
        let values: Vec<f64> = rewards.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dones = vec![false; rewards.len()];
        let (adv, _) = compute_gae(&rewards, &values, &dones, last, 1.0, 1.0).unwrap();
        for t in 0..rewards.len() {
            let want: f64 = rewards[t..].iter().sum::<f64>() + last - values[t];
            prop_assert!((adv[t] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn config_text_round_trips(
        lr in 1e-6f64..1.0,
        alpha in 0.0f64..=1.0,
        seed in any::<u64>(),
        n_train in 1usize..500,
        temp in 0.05f64..5.0,
        maze in any::<bool>(),
        kind in 0usize..4,
    ) {
        let mut c = ExperimentConfig::default();
        c.ppo.lr = lr;
        c.ppo.alpha = alpha;
        c.ppo.seed = seed;
        c.n_train = n_train;
        c.mask_temperature = temp;
        c.env = if maze { EnvKind::Maze } else { EnvKind::Dodge };
        c.policy = PolicyKind::ALL[kind];
        prop_assert_eq!(ExperimentConfig::parse_str(&c.to_text()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn all_policies_share_output_shapes(seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let obs = Tensor::<f32>::from_fn([4, 16, 16], |_| rng.gen_range(0.0..1.0));
        for kind in PolicyKind::ALL {
            let mut store = ParamStore::<f32>::new();
            let p = Policy::new(PolicyConfig::new(kind), &mut store, &mut rng).unwrap();
            let out = p.evaluate(&store, &obs, MaskMode::Eval).unwrap();
            prop_assert_eq!(out.action_logits.shape(), &[NUM_ACTIONS]);
            prop_assert!(out.value.is_finite());
            prop_assert!(out.action_logits.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn open_sparse_agent_equals_dense_agent(seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let mut sparse_store = ParamStore::<f64>::new();
        let sparse = Policy::new(PolicyConfig::new(PolicyKind::SparseMasked), &mut sparse_store, &mut rng).unwrap();
        let mut dense_store = ParamStore::<f64>::new();
        let dense = Policy::new(PolicyConfig::new(PolicyKind::Attention), &mut dense_store, &mut rng).unwrap();
        let ids: Vec<_> = dense_store.ids().collect();
        for id in ids {
            let name = dense_store.name(id).to_string();
            let src = sparse_store.find(&name).expect("dense parameters are a subset");
            let v = sparse_store.value(src).clone();
            dense_store.set_value(id, v).unwrap();
        }
        let obs = Tensor::from_fn([4, 16, 16], |_| rng.gen_range(0.0..1.0));
        let trunk = sparse.trunk().unwrap();
        let ones = ForcedMasks::ones(trunk.num_tokens(), trunk.layers.len());
        let a = sparse.evaluate(&sparse_store, &obs, MaskMode::Forced(&ones)).unwrap();
        let b = dense.evaluate(&dense_store, &obs, MaskMode::Eval).unwrap();
        for (x, y) in a.action_logits.data().iter().zip(b.action_logits.data()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        prop_assert!((a.value - b.value).abs() < 1e-6);
    }

    #[test]
    fn standardized_advantages_are_unaffected_by_normalization(seed in any::<u64>()) {
        let mut rng = stream(seed, &[]);
        let n = 32;
        let mut adv: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        smap_core::ppo::normalize(&mut adv);
        let batch = RolloutBatch::<f64> {
            observations: vec![Tensor::zeros([1]); n],
            actions: (0..n).map(|i| i % 2).collect(),
            old_log_probs: vec![0.5f64.ln(); n],
            values: vec![0.0; n],
            rewards: vec![0.0; n],
            dones: vec![true; n],
            advantages: adv,
            returns: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let run = |normalize: bool| {
            let cfg = PpoConfig { normalize_advantages: normalize, minibatch: 8, rollout: 32, envs: 1, total_steps: 32, ..Default::default() };
            let mut store = ParamStore::<f64>::new();
            let policy = BanditPolicy::new(&mut store);
            let mut adam = Adam::new(&store);
            ppo_update(&batch, &policy, &mut store, &mut adam, &cfg, 0).unwrap();
            store.to_bytes()
        };
        let (a, b) = (run(true), run(false));
        prop_assert!(a.len() == b.len());
        let decode = |bytes: &[u8]| -> Vec<f64> {
            let mut s = ParamStore::<f64>::new();
            let p = BanditPolicy::new(&mut s);
            s.load_bytes(bytes).unwrap();
            let mut v = s.value(p.logits).data().to_vec();
            v.push(s.value(p.value).item());
            v
        };
        for (x, y) in decode(&a).iter().zip(decode(&b)) {
            prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
        }
    }
}

#[test]
fn parameter_counts_are_stable() {
    let counts: Vec<(PolicyKind, usize)> = PolicyKind::ALL
        .iter()
        .map(|&k| {
            let mut store = ParamStore::<f32>::new();
            Policy::new(PolicyConfig::new(k), &mut store, &mut stream(0, &[])).unwrap();
            (k, store.num_scalars())
        })
        .collect();
    let again: Vec<usize> = PolicyKind::ALL
        .iter()
        .map(|&k| {
            let mut store = ParamStore::<f32>::new();
            Policy::new(PolicyConfig::new(k), &mut store, &mut stream(9, &[])).unwrap();
            store.num_scalars()
        })
        .collect();
    assert_eq!(counts.iter().map(|c| c.1).collect::<Vec<_>>(), again);
    let expected = [
        (PolicyKind::Cnn, 39734),
        (PolicyKind::Attention, 19014),
        (PolicyKind::InputMasked, 37678),
        (PolicyKind::SparseMasked, 20305),
    ];
    assert_eq!(counts, expected);
}
