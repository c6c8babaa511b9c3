//! Whole-model gradients against finite differences, and independent
//! oracles for the recurrent and return computations.

use calender::envloop::{reward_components, total_reward, ObjectiveState, RewardConfig, RewardComponents};
use calender::forecast::{gru_sequence, skip_gru, ForecasterConfig, Lstnet};
use calender::mpdppo::{clipped_surrogate, discounted_returns, gae_advantages, standardize};
use calender::neuro::{entropy_tape, log_prob_tape, BranchSpec, CriticNetwork, NetworkConfig, PolicyNetwork};
use diffcore::check::{finite_difference, max_relative_error};
use diffcore::{Bound, GruVars, Mode, ParamSet, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn weighted_sum(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, &tape.shape(x).to_vec(), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

/// Max relative error between tape gradients and central differences with
/// respect to every parameter of `params`.
fn param_gradient_error<F>(params: &ParamSet, build: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Var,
{
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound);
    tape.backward(loss).unwrap();
    let mut work = params.clone();
    work.zero_grad();
    work.accumulate_grads(&tape, &bound);
    let ids: Vec<_> = params.ids().collect();
    let analytic: Vec<Tensor> = ids.iter().map(|&id| work.grad(id).clone()).collect();
    let values: Vec<Tensor> = ids.iter().map(|&id| params.value(id).clone()).collect();
    let numeric = finite_difference(
        |xs| {
            let mut p = params.clone();
            for (&id, x) in ids.iter().zip(xs) {
                *p.value_mut(id) = x.clone();
            }
            let mut t = Tape::new();
            let b = p.bind_frozen(&mut t);
            let l = build(&mut t, &b);
            t.value(l).item().unwrap()
        },
        &values,
        H,
    );
    max_relative_error(&analytic, &numeric, FLOOR)
}

fn tiny_forecaster(rng: &mut ChaCha8Rng) -> (ForecasterConfig, usize) {
    let window = rng.random_range(7..=10);
    let kernel = rng.random_range(1..=3);
    let pool = rng.random_range(1..=2);
    let cfg = ForecasterConfig {
        window,
        kernel,
        conv_channels: rng.random_range(2..=3),
        pool,
        lstm_hidden: rng.random_range(2..=3),
        skip_hidden: 2,
        skip_period: rng.random_range(1..=2),
        dropout: 0.0,
        fusion_hidden: 3,
        ..ForecasterConfig::default()
    };
    (cfg, rng.random_range(1..=3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lstnet_parameter_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cfg, f) = tiny_forecaster(&mut rng);
        let net = Lstnet::new(cfg.clone(), f, &mut rng).unwrap();
        let x = random_tensor(&mut rng, &[2, cfg.window, f], 1.5);
        let err = param_gradient_error(net.params(), |tape, bound| {
            let xv = tape.constant(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let y = net.forward_tape(tape, bound, xv, Mode::Eval, &mut r).unwrap();
            weighted_sum(tape, y, seed)
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn policy_parameter_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetworkConfig {
            state_dim: 4,
            trunk_hidden: vec![5],
            critic_hidden: vec![5],
            branches: vec![
                BranchSpec { hidden_sizes: vec![3], ..BranchSpec::width() },
                BranchSpec { hidden_sizes: vec![3], ..BranchSpec::thickness() },
            ],
        };
        let mut net = PolicyNetwork::new(cfg, &mut rng).unwrap();
        // lift the tiny output gain so every path carries signal
        for id in net.params().ids().collect::<Vec<_>>() {
            let t = random_tensor(&mut rng, &net.params().value(id).shape().to_vec(), 0.8);
            *net.params_mut().value_mut(id) = t;
        }
        let s = random_tensor(&mut rng, &[3, 4], 1.0);
        let a = [random_tensor(&mut rng, &[3, 1], 1.0), random_tensor(&mut rng, &[3, 2], 1.0)];
        let err = param_gradient_error(net.params(), |tape, bound| {
            let sv = tape.constant(s.clone());
            let outs = net.forward_tape(tape, bound, sv).unwrap();
            let mut total = None;
            for (o, a) in outs.iter().zip(&a) {
                let av = tape.constant(a.clone());
                let lp = log_prob_tape(tape, o, av).unwrap();
                let lp = weighted_sum(tape, lp, seed);
                let ent = entropy_tape(tape, o.log_std).unwrap();
                let term = tape.add(lp, ent).unwrap();
                total = Some(match total { None => term, Some(t) => tape.add(t, term).unwrap() });
            }
            total.unwrap()
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn critic_parameter_gradients(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = NetworkConfig {
            state_dim: 3,
            trunk_hidden: vec![4],
            critic_hidden: vec![4, 3],
            branches: vec![BranchSpec::width(), BranchSpec::thickness()],
        };
        let net = CriticNetwork::new(cfg, &mut rng).unwrap();
        let s = random_tensor(&mut rng, &[4, 3], 1.0);
        let g = random_tensor(&mut rng, &[4], 1.0);
        let err = param_gradient_error(net.params(), |tape, bound| {
            let sv = tape.constant(s.clone());
            let vs = net.forward_tape(tape, bound, sv).unwrap();
            let gv = tape.constant(g.clone());
            let mut total = None;
            for v in vs {
                let e = tape.sub(v, gv).unwrap();
                let e2 = tape.square(e).unwrap();
                let m = tape.mean(e2).unwrap();
                total = Some(match total { None => m, Some(t) => tape.add(t, m).unwrap() });
            }
            total.unwrap()
        });
        prop_assert!(err < TOL, "relative error {err}");
    }

    #[test]
    fn gae_with_unit_lambda_and_zero_values_is_the_return(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20;
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
        d[n - 1] = true;
        let gamma = rng.random_range(0.0..=1.0);
        let (a, g) = gae_advantages(&r, &vec![0.0; n], &d, gamma, 1.0, 0.0).unwrap();
        let ret = discounted_returns(&r, &d, gamma).unwrap();
        for i in 0..n {
            prop_assert!((a[i] - ret[i]).abs() < 1e-10);
            prop_assert!((g[i] - ret[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn surrogate_bounds(ratio in 0.0f64..3.0, adv in -5.0f64..5.0, eps in 0.01f64..0.5) {
        let s = clipped_surrogate(ratio, adv, eps);
        let cap = (ratio * adv).max((1.0 - eps) * adv).max((1.0 + eps) * adv);
        prop_assert!(s <= cap);
        if (1.0 - eps..=1.0 + eps).contains(&ratio) {
            prop_assert_eq!(s, ratio * adv);
        }
    }

    #[test]
    fn standardized_moments(xs in prop::collection::vec(-100.0f64..100.0, 2..200)) {
        let z = standardize(&xs, 1e-8);
        let n = z.len() as f64;
        let m = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
        prop_assert!(m.abs() < 1e-10);
        let spread = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) - xs.iter().copied().fold(f64::INFINITY, f64::min);
        if spread > 1e-3 {
            prop_assert!((sd - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn reward_terms_stay_in_range(
        e in 0.0f64..50.0,
        best in 0.0f64..50.0,
        a in prop::collection::vec(-3.0f64..3.0, 4),
        tau in 0.1f64..=1.0,
    ) {
        let cfg = RewardConfig { steady_threshold: tau, ..RewardConfig::default() };
        let obj = ObjectiveState {
            name: "width",
            y: 480.0 + e,
            target: 480.0,
            tolerance: 1.0,
            e,
            e_best: best,
            controls: a[..2].to_vec(),
            prev_controls: a[2..].to_vec(),
        };
        let c = reward_components(&obj, &cfg);
        prop_assert!(c.error > 0.0 && c.error <= 2.0);
        prop_assert!(c.progress.abs() <= 0.3);
        if (best - e).abs() < 15.0 {
            prop_assert!(c.progress.abs() < 0.3);
        }
        prop_assert!(c.action <= 0.0);
        prop_assert!(c.steady >= 0.0);
        let big = RewardComponents { error: 40.0 * e, ..c };
        let r = total_reward(&[c, big], &cfg).unwrap();
        prop_assert!((-5.0..=5.0).contains(&r));
    }
}

/// Plain GRU in scalar loops, gate blocks ordered reset, update, candidate.
fn oracle_gru(seq: &[Vec<f64>], w_ih: &Tensor, w_hh: &Tensor, b_ih: &[f64], b_hh: &[f64]) -> Vec<f64> {
    let hidden = w_hh.shape()[0];
    let input = w_ih.shape()[0];
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut h = vec![0.0; hidden];
    for x in seq {
        let lin = |w: &Tensor, v: &[f64], b: &[f64], n_in: usize, col: usize| -> f64 {
            b[col] + (0..n_in).map(|k| v[k] * w.data()[k * 3 * hidden + col]).sum::<f64>()
        };
        let mut next = vec![0.0; hidden];
        for j in 0..hidden {
            let r = sig(lin(w_ih, x, b_ih, input, j) + lin(w_hh, &h, b_hh, hidden, j));
            let z = sig(lin(w_ih, x, b_ih, input, hidden + j) + lin(w_hh, &h, b_hh, hidden, hidden + j));
            let n = (lin(w_ih, x, b_ih, input, 2 * hidden + j) + r * lin(w_hh, &h, b_hh, hidden, 2 * hidden + j)).tanh();
            next[j] = (1.0 - z) * n + z * h[j];
        }
        h = next;
    }
    h
}

#[test]
fn skip_gru_with_unit_period_is_a_plain_gru() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, l, c, hdim) = (3, rng.random_range(1..9), rng.random_range(1..5), rng.random_range(1..6));
        let w_ih = random_tensor(&mut rng, &[c, 3 * hdim], 0.9);
        let w_hh = random_tensor(&mut rng, &[hdim, 3 * hdim], 0.9);
        let b_ih = random_tensor(&mut rng, &[3 * hdim], 0.5);
        let b_hh = random_tensor(&mut rng, &[3 * hdim], 0.5);
        let x = random_tensor(&mut rng, &[b, l, c], 1.5);
        let mut tape = Tape::new();
        let p = GruVars {
            w_ih: tape.constant(w_ih.clone()),
            w_hh: tape.constant(w_hh.clone()),
            b_ih: tape.constant(b_ih.clone()),
            b_hh: tape.constant(b_hh.clone()),
        };
        let xv = tape.constant(x.clone());
        let skip = skip_gru(&mut tape, xv, 1, &p).unwrap();
        let plain = gru_sequence(&mut tape, xv, &p).unwrap();
        assert_eq!(tape.value(skip), tape.value(plain));
        for row in 0..b {
            let seq: Vec<Vec<f64>> = (0..l)
                .map(|t| x.data()[(row * l + t) * c..(row * l + t + 1) * c].to_vec())
                .collect();
            let want = oracle_gru(&seq, &w_ih, &w_hh, b_ih.data(), b_hh.data());
            let got = &tape.value(skip).data()[row * hdim..(row + 1) * hdim];
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "seed {seed}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn skip_gru_phases_are_end_aligned() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (l, c, hdim, period) = (7, 2, 3, 3);
    let w_ih = random_tensor(&mut rng, &[c, 3 * hdim], 0.9);
    let w_hh = random_tensor(&mut rng, &[hdim, 3 * hdim], 0.9);
    let b_ih = random_tensor(&mut rng, &[3 * hdim], 0.5);
    let b_hh = random_tensor(&mut rng, &[3 * hdim], 0.5);
    let x = random_tensor(&mut rng, &[1, l, c], 1.0);
    let mut tape = Tape::new();
    let p = GruVars {
        w_ih: tape.constant(w_ih.clone()),
        w_hh: tape.constant(w_hh.clone()),
        b_ih: tape.constant(b_ih.clone()),
        b_hh: tape.constant(b_hh.clone()),
    };
    let xv = tape.constant(x.clone());
    let out = skip_gru(&mut tape, xv, period, &p).unwrap();
    let step = |t: usize| x.data()[t * c..(t + 1) * c].to_vec();
    let phases: [&[usize]; 3] = [&[0, 3, 6], &[2, 5], &[1, 4]];
    for (r, steps) in phases.iter().enumerate() {
        let seq: Vec<Vec<f64>> = steps.iter().map(|&t| step(t)).collect();
        let want = oracle_gru(&seq, &w_ih, &w_hh, b_ih.data(), b_hh.data());
        let got = &tape.value(out).data()[r * hdim..(r + 1) * hdim];
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
