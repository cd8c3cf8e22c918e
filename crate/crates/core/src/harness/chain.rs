//! Return-distribution checks on the chain MDP against Monte-Carlo ground
//! truth.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::agent::{make_variant, Agent};
use super::config::{AgentConfig, Variant};
use super::train::csv_err;
use crate::critic::quantile_levels;
use crate::envs::{generate_dataset, BehaviorMix, ChainMdp, Env, EnvKind, ReplayBuffer, ScriptedPolicy};
use crate::error::{ensure, Error, Result};
use crate::nn::Tensor;
use crate::oracles::{empirical_quantiles, mc_return_distribution, w1_distance, EmpiricalDistribution};

/// Rollouts on the chain end after three steps; this only bounds runaway
/// policies on longer chains.
const ORACLE_HORIZON: usize = 200;

/// A probed state-action pair: chain state index and scalar action.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Probe {
    pub state: usize,
    pub action: f64,
}

impl Probe {
    pub fn state_vec(&self) -> Vec<f64> {
        ChainMdp::default().one_hot(self.state)
    }

    /// 0 for the risky branch, 1 for the safe one.
    pub fn action_id(&self) -> usize {
        usize::from(self.action < 0.0)
    }
}

/// Every state with one risky (`+0.5`) and one safe (`-0.5`) action.
pub fn chain_probes() -> Vec<Probe> {
    (0..ChainMdp::default().n_states())
        .flat_map(|s| [0.5, -0.5].map(|a| Probe { state: s, action: a }))
        .collect()
}

fn make_chain() -> Box<dyn Env> {
    Box::new(ChainMdp::default())
}

/// `[probes, n]` critic samples, one row per probe.
fn critic_distributions(agent: &Agent, probes: &[Probe], n: usize, rng: &mut impl RngCore) -> Result<Vec<EmpiricalDistribution>> {
    let states: Vec<Vec<f64>> = probes.iter().map(Probe::state_vec).collect();
    let states = Tensor::from_rows(&states)?;
    let actions = Tensor::column(&probes.iter().map(|p| p.action).collect::<Vec<_>>());
    let z = agent
        .return_samples(&states, &actions, n, rng)?
        .ok_or_else(|| Error::Config(format!("variant {} has no return distribution", agent.variant)))?;
    (0..probes.len())
        .map(|r| EmpiricalDistribution::new(z.row_slice(r).to_vec()))
        .collect()
}

/// Monte-Carlo reference for the agent's current policy.
pub struct ChainOracle {
    pub gamma: f64,
    pub rollouts: usize,
}

impl ChainOracle {
    pub fn new(gamma: f64, rollouts: usize) -> Self {
        Self { gamma, rollouts }
    }

    /// Mean over probes of W1 between the agent's critic and rollouts of its
    /// own one-step policy.
    pub fn mean_w1(&self, agent: &Agent, probes: &[Probe], rng: &mut ChaCha8Rng) -> Result<f64> {
        let critic = critic_distributions(agent, probes, self.rollouts, rng)?;
        let policy = |s: &[f64], r: &mut dyn RngCore| agent.act(s, r).expect("chain state matches the actor input");
        let mut total = 0.0;
        for (p, c) in probes.iter().zip(&critic) {
            let mc = mc_return_distribution(
                &make_chain,
                &policy,
                &p.state_vec(),
                &[p.action],
                self.rollouts,
                self.gamma,
                ORACLE_HORIZON,
                rng.next_u64(),
            )?;
            total += w1_distance(c, &mc.dist)?;
        }
        Ok(total / probes.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct PolicyEvalReport {
    pub variant: Variant,
    pub probes: Vec<Probe>,
    /// Gradient-step counts at which the critic was measured.
    pub epochs: Vec<usize>,
    /// `w1[e][p]`: distance at epoch `e` for probe `p`.
    pub w1: Vec<Vec<f64>>,
    pub oracle: Vec<EmpiricalDistribution>,
    /// Critic samples per probe at the last epoch.
    pub critic: Vec<EmpiricalDistribution>,
}

impl PolicyEvalReport {
    /// Largest distance over probes at the last epoch.
    pub fn final_max_w1(&self) -> Option<f64> {
        self.w1.last().map(|row| row.iter().copied().fold(0.0, f64::max))
    }

    /// The worst probe distance never increases over the last `k` epochs.
    pub fn tail_non_increasing(&self, k: usize) -> bool {
        let maxima: Vec<f64> = self.w1.iter().map(|row| row.iter().copied().fold(0.0, f64::max)).collect();
        let tail = &maxima[maxima.len().saturating_sub(k)..];
        tail.windows(2).all(|w| w[1] <= w[0])
    }

    /// `epoch, <probe columns>` table.
    pub fn write_w1_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["epoch".to_string()];
        header.extend(self.probes.iter().map(|p| format!("s{}_a{}", p.state, p.action_id())));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (e, row) in self.epochs.iter().zip(&self.w1) {
            let mut rec = vec![e.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Diagnostic dump: `state, action, source, q_1..q_M` where `q_i` is the
    /// lower empirical quantile at level `(2i - 1) / (2M)`.
    pub fn write_samples_csv(&self, path: &Path, m: usize) -> Result<()> {
        let levels = quantile_levels(m)?;
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["state".to_string(), "action".to_string(), "source".to_string()];
        header.extend((1..=m).map(|i| format!("q{i}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for (i, p) in self.probes.iter().enumerate() {
            for (source, dist) in [("critic", &self.critic[i]), ("oracle", &self.oracle[i])] {
                let mut rec = vec![p.state.to_string(), p.action_id().to_string(), source.to_string()];
                rec.extend(empirical_quantiles(dist, levels.as_slice())?.iter().map(f64::to_string));
                w.write_record(&rec).map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Episodes that always take one of the two probe actions, half each. Logged
/// actions then sit exactly where the critic is queried.
pub fn probe_action_mix() -> BehaviorMix {
    BehaviorMix {
        policies: vec![
            (ScriptedPolicy::Constant(vec![0.5]), 0.5),
            (ScriptedPolicy::Constant(vec![-0.5]), 0.5),
        ],
        noise_std: 0.0,
    }
}

/// Train only the critic side of `config.variant` on chain data, bootstrapping
/// with actions from a frozen scripted `policy`, and measure W1 against that
/// policy's Monte-Carlo return law at each of `epochs`.
pub fn chain_policy_evaluation(config: &AgentConfig, policy: &ScriptedPolicy, epochs: &[usize]) -> Result<PolicyEvalReport> {
    config.validate()?;
    ensure!(
        config.variant != Variant::Fql,
        Config,
        "policy evaluation needs a distributional critic, got variant {}",
        config.variant
    );
    ensure!(config.oracle_rollouts >= 1, Config, "`oracle_rollouts` must be at least 1 here");
    ensure!(epochs.windows(2).all(|w| w[0] < w[1]), Contract, "measurement epochs must increase");

    let ds = generate_dataset(EnvKind::Chain, &probe_action_mix(), config.dataset_size, config.dataset_seed);
    let buffer = ReplayBuffer::with_offline(ds.len(), &ds.transitions);
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed);
    eval_rng.set_stream(3);
    let mut agent = make_variant(config, ds.state_dim, ds.action_dim, &mut init_rng)?;

    let probes = chain_probes();
    let n = config.oracle_rollouts;
    let oracle = probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pol = |s: &[f64], r: &mut dyn RngCore| policy.act(s, 1, 0.0, r);
            let seed = config.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            Ok(mc_return_distribution(
                &make_chain,
                &pol,
                &p.state_vec(),
                &[p.action],
                n,
                config.gamma,
                ORACLE_HORIZON,
                seed,
            )?
            .dist)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut w1 = Vec::with_capacity(epochs.len());
    let mut critic = Vec::new();
    let mut step = 0;
    for &target in epochs {
        while step < target {
            let batch = buffer.sample(config.batch_size, &mut rng)?;
            let next: Vec<f64> = (0..batch.len())
                .flat_map(|r| policy.act(batch.next_states.row_slice(r), 1, 0.0, &mut rng))
                .collect();
            agent.critic_update(&batch, &Tensor::column(&next), &mut rng)?;
            agent.target_update()?;
            step += 1;
        }
        critic = critic_distributions(&agent, &probes, n, &mut eval_rng)?;
        w1.push(
            critic
                .iter()
                .zip(&oracle)
                .map(|(c, o)| w1_distance(c, o))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(PolicyEvalReport {
        variant: config.variant,
        probes,
        epochs: epochs.to_vec(),
        w1,
        oracle,
        critic,
    })
}
