use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dfc_core::critic::{q_estimate, quantile_huber, quantile_levels, MainCritic};
use dfc_core::envs::{ChainMdp, Env, ScriptedPolicy};
use dfc_core::nn::{ema_update, AdamState, Graph};
use dfc_core::oracles::{mc_return_distribution, w1_distance};
use dfc_core::{Mlp, Tensor};

/// Minimise the sorted quantile loss over free per-sample outputs.
fn minimise_free_outputs(targets: &[f64], m: usize) -> Vec<f64> {
    let levels = quantile_levels(m).unwrap();
    let t = Tensor::row(targets);
    let mut z = vec![0.0; m];
    let mut opt = AdamState::new(m, 0.01);
    for _ in 0..6000 {
        let mut g = Graph::new();
        let zv = g.param(Tensor::row(&z));
        let sorted = g.sort_rows(zv);
        let loss = g.quantile_huber(sorted, &t, levels.as_slice(), 1e-3).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(zv).unwrap().to_vec();
        opt.step(&mut z, &grad).unwrap();
    }
    z.sort_by(f64::total_cmp);
    z
}

/// Coordinate `i` of the sorted optimum minimises `sum_j rho_{tau_i}(t_j - z)`
/// on its own, so a per-coordinate grid search is exhaustive.
fn grid_minimiser(targets: &[f64], m: usize) -> Vec<f64> {
    let levels = quantile_levels(m).unwrap();
    let (lo, hi) = targets.iter().fold((f64::MAX, f64::MIN), |(a, b), &t| (a.min(t), b.max(t)));
    let grid: Vec<f64> = (0..=4000).map(|k| lo - 0.5 + (hi - lo + 1.0) * k as f64 / 4000.0).collect();
    levels
        .as_slice()
        .iter()
        .map(|&tau| {
            let cost = |z: f64| targets.iter().map(|&t| quantile_huber(t - z, tau, 1e-3)).sum::<f64>();
            *grid.iter().min_by(|a, b| cost(**a).total_cmp(&cost(**b))).unwrap()
        })
        .collect()
}

#[test]
fn distill_minimiser_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in 2..=5 {
        let targets: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let direct = minimise_free_outputs(&targets, m);
        let grid = grid_minimiser(&targets, m);
        for (d, g) in direct.iter().zip(&grid) {
            assert!((d - g).abs() < 5e-3, "m={m}: {direct:?} vs {grid:?}");
        }
    }
}

#[test]
fn distill_minimiser_is_shift_equivariant() {
    let targets = [-0.7, 0.2, 0.4, 1.9];
    let base = minimise_free_outputs(&targets, 4);
    for c in [-3.0, 0.5, 10.0] {
        let shifted: Vec<f64> = targets.iter().map(|t| t + c).collect();
        let moved = minimise_free_outputs(&shifted, 4);
        for (b, s) in base.iter().zip(&moved) {
            assert!((s - b - c).abs() < 5e-3, "shift {c}: {base:?} -> {moved:?}");
        }
    }
}

fn chain() -> Box<dyn Env> {
    Box::new(ChainMdp::default())
}

fn uniform_self_distance(n: usize, seed: u64) -> f64 {
    let policy = |s: &[f64], r: &mut dyn RngCore| ScriptedPolicy::Uniform.act(s, 1, 0.0, r);
    let s0 = ChainMdp::default().one_hot(0);
    let a = mc_return_distribution(&chain, &policy, &s0, &[0.5], n, 0.99, 200, seed).unwrap();
    let b = mc_return_distribution(&chain, &policy, &s0, &[0.5], n, 0.99, 200, seed ^ 0xdead_beef).unwrap();
    w1_distance(&a.dist, &b.dist).unwrap()
}

#[test]
fn chain_oracle_self_distance() {
    assert!(uniform_self_distance(10_000, 1) <= 0.02);
}

#[test]
fn more_rollouts_shrink_self_distance() {
    let avg = |n| (0..10).map(|s| uniform_self_distance(n, 100 + s)).sum::<f64>() / 10.0;
    let (w5, w20) = (avg(5_000), avg(20_000));
    assert!(w20 <= w5, "5k: {w5}, 20k: {w20}");
}

#[test]
fn q_estimate_tracks_sample_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let critic = MainCritic::new(2, 1, &[16], 1e-3, &mut rng).unwrap();
    let s = Tensor::row(&[0.3, -0.2]);
    let a = Tensor::row(&[0.1]);
    let noise = Tensor::matrix(1, 20_000, (0..20_000).map(|_| rng.sample(rand_distr::StandardNormal)).collect()).unwrap();
    let reference = critic.samples(&s, &a, &noise).unwrap().mean();
    let spread = critic
        .samples(&s, &a, &noise)
        .unwrap()
        .data()
        .iter()
        .map(|z| (z - reference).powi(2))
        .sum::<f64>()
        / 20_000.0;
    let m = 64;
    let q = q_estimate(&critic, &s, &a, m, &mut rng).unwrap().data()[0];
    assert!((q - reference).abs() <= 4.0 * (spread / m as f64).sqrt() + 1e-9);
}

proptest! {
    #[test]
    fn ema_stays_in_envelope(seed in 0u64..1000, coeff in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut target = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let online = Mlp::new(&[3, 4, 2], &mut rng).unwrap();
        let before = target.params().to_vec();
        ema_update(&mut target, &online, coeff).unwrap();
        for ((t, b), o) in target.params().iter().zip(&before).zip(online.params()) {
            prop_assert!(*t >= b.min(*o) - 1e-15 && *t <= b.max(*o) + 1e-15);
        }
    }
}
