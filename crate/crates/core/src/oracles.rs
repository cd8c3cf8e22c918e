//! Ground truth for return distributions: seeded Monte-Carlo rollouts,
//! order-statistic quantiles and the sorted-sample Wasserstein-1 estimate.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::envs::Env;
use crate::error::{ensure, Result};

/// Finite samples kept in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    samples: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        ensure!(samples.iter().all(|v| v.is_finite()), Numeric, "non-finite sample");
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len().max(1) as f64
    }

    /// Lower empirical quantile: the `ceil(tau * N)`-th order statistic.
    pub fn quantile(&self, tau: f64) -> Result<f64> {
        ensure!(!self.samples.is_empty(), Contract, "quantile of an empty distribution");
        ensure!((0.0..=1.0).contains(&tau), Contract, "quantile level {tau} outside [0, 1]");
        let n = self.samples.len();
        let k = ((tau * n as f64).ceil() as usize).clamp(1, n);
        Ok(self.samples[k - 1])
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v + c).collect(),
        }
    }

    /// `n` samples at the midpoint levels `(2i - 1) / (2n)`, for comparing
    /// distributions of different sizes.
    pub fn resample_to(&self, n: usize) -> Result<Self> {
        let levels: Vec<f64> = (1..=n).map(|i| (2 * i - 1) as f64 / (2 * n) as f64).collect();
        Ok(Self {
            samples: empirical_quantiles(self, &levels)?,
        })
    }
}

pub fn empirical_quantiles(dist: &EmpiricalDistribution, levels: &[f64]) -> Result<Vec<f64>> {
    levels.iter().map(|&t| dist.quantile(t)).collect()
}

/// `(1/N) sum_i |a_(i) - b_(i)|` over aligned order statistics.
pub fn w1_distance(a: &EmpiricalDistribution, b: &EmpiricalDistribution) -> Result<f64> {
    ensure!(
        a.len() == b.len(),
        Contract,
        "W1 estimate needs equal sample counts, got {} and {}",
        a.len(),
        b.len()
    );
    ensure!(!a.is_empty(), Contract, "W1 of empty sample sets");
    Ok(a.samples.iter().zip(&b.samples).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Monte-Carlo returns plus the discounted tail that truncation may have cut.
#[derive(Debug, Clone, PartialEq)]
pub struct McReturns {
    pub dist: EmpiricalDistribution,
    /// `gamma^horizon * r_max / (1 - gamma)`; zero when every rollout terminated.
    pub truncation_bound: f64,
}

/// Policy used by rollouts; deterministic given its rng.
pub type RolloutPolicy<'a> = dyn Fn(&[f64], &mut dyn RngCore) -> Vec<f64> + 'a;

/// Sample `sum_t gamma^t r_t` starting from `(state, action)` and following
/// `policy` afterwards. Rollout `i` uses stream `i` of a ChaCha generator
/// keyed by `seed`, so results do not depend on execution order.
#[allow(clippy::too_many_arguments)]
pub fn mc_return_distribution(
    make_env: &dyn Fn() -> Box<dyn Env>,
    policy: &RolloutPolicy<'_>,
    state: &[f64],
    action: &[f64],
    n_rollouts: usize,
    gamma: f64,
    horizon: usize,
    seed: u64,
) -> Result<McReturns> {
    ensure!(n_rollouts >= 1, Contract, "need at least one rollout");
    ensure!((0.0..=1.0).contains(&gamma), Contract, "discount {gamma} outside [0, 1]");
    let mut env = make_env();
    let mut samples = Vec::with_capacity(n_rollouts);
    let mut truncated_any = false;
    for i in 0..n_rollouts {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        env.set_state(state)?;
        let mut ret = 0.0;
        let mut discount = 1.0;
        let mut a = action.to_vec();
        let mut ended = false;
        for _ in 0..horizon {
            let r = env.step(&a, &mut rng)?;
            ret += discount * r.reward;
            discount *= gamma;
            if r.episode_over() {
                ended = r.terminal;
                break;
            }
            a = policy(&r.next_state, &mut rng);
        }
        truncated_any |= !ended;
        samples.push(ret);
    }
    let truncation_bound = if truncated_any && gamma < 1.0 {
        gamma.powi(horizon as i32) * make_env().reward_bound() / (1.0 - gamma)
    } else {
        0.0
    };
    Ok(McReturns {
        dist: EmpiricalDistribution::new(samples)?,
        truncation_bound,
    })
}
