//! Training loop, evaluation protocol and the metrics file.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::agent::{make_variant, Agent, StepStats};
use super::chain::{chain_probes, ChainOracle};
use super::config::AgentConfig;
use crate::envs::{Batch, Dataset, EnvKind, ReplayBuffer, Transition};
use crate::error::{ensure, Error, Result};
use crate::policy::explore_action;

pub const METRICS_HEADER: [&str; 13] = [
    "step",
    "phase",
    "eval_success_rate",
    "eval_mean_return",
    "flow_critic_loss",
    "main_critic_loss",
    "bc_flow_loss",
    "actor_loss",
    "distill",
    "q_mean",
    "actor_grad_norm",
    "actor_grad_norm_var",
    "w1_to_oracle",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Offline,
    Online,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Offline => "offline",
            Phase::Online => "online",
        }
    }
}

/// One evaluation epoch. Loss columns average the gradient steps since the
/// previous row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub phase: Phase,
    pub eval_success_rate: f64,
    pub eval_mean_return: f64,
    pub flow_critic: Option<f64>,
    pub main_critic: Option<f64>,
    pub bc_flow: f64,
    pub actor: f64,
    pub distill: f64,
    pub q_mean: f64,
    pub actor_grad_norm: f64,
    pub actor_grad_norm_var: f64,
    pub w1_to_oracle: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    /// Fields in header order. `f64` display is the shortest text that parses
    /// back to the same bits.
    pub fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.phase.as_str().to_string(),
            self.eval_success_rate.to_string(),
            self.eval_mean_return.to_string(),
            opt(self.flow_critic),
            opt(self.main_critic),
            self.bc_flow.to_string(),
            self.actor.to_string(),
            self.distill.to_string(),
            self.q_mean.to_string(),
            self.actor_grad_norm.to_string(),
            self.actor_grad_norm_var.to_string(),
            opt(self.w1_to_oracle),
        ]
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    inner: csv::Writer<fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut inner = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        inner.write_record(METRICS_HEADER).map_err(|e| csv_err(path, e))?;
        inner.flush().map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
        })
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        self.inner.write_record(row.fields()).map_err(|e| csv_err(&self.path, e))?;
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, line, format!("{other:?}")),
    }
}

/// Running sums between evaluation epochs.
#[derive(Debug, Default)]
struct Accumulator {
    n: usize,
    flow: f64,
    main: f64,
    has_flow: bool,
    has_main: bool,
    bc: f64,
    actor: f64,
    distill: f64,
    q: f64,
    norms: Vec<f64>,
}

impl Accumulator {
    fn push(&mut self, s: &StepStats) {
        self.n += 1;
        if let Some(v) = s.flow_critic {
            self.flow += v;
            self.has_flow = true;
        }
        if let Some(v) = s.main_critic {
            self.main += v;
            self.has_main = true;
        }
        self.bc += s.bc_flow;
        self.actor += s.actor;
        self.distill += s.distill;
        self.q += s.q_mean;
        self.norms.push(s.actor_grad_norm);
    }

    fn row(&mut self, step: usize, phase: Phase, success: f64, ret: f64, w1: Option<f64>) -> MetricsRow {
        let n = self.n.max(1) as f64;
        let mean_norm = self.norms.iter().sum::<f64>() / n;
        let var_norm = self.norms.iter().map(|g| (g - mean_norm).powi(2)).sum::<f64>() / n;
        let row = MetricsRow {
            step,
            phase,
            eval_success_rate: success,
            eval_mean_return: ret,
            flow_critic: self.has_flow.then(|| self.flow / n),
            main_critic: self.has_main.then(|| self.main / n),
            bc_flow: self.bc / n,
            actor: self.actor / n,
            distill: self.distill / n,
            q_mean: self.q / n,
            actor_grad_norm: mean_norm,
            actor_grad_norm_var: var_norm,
            w1_to_oracle: w1,
        };
        *self = Accumulator::default();
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub success_rate: f64,
    pub mean_return: f64,
    /// Undiscounted return of each episode, in episode order.
    pub returns: Vec<f64>,
    pub successes: Vec<bool>,
}

/// Action map used by [`evaluate`].
pub type EvalPolicy<'a> = dyn Fn(&[f64], &mut dyn RngCore) -> Result<Vec<f64>> + 'a;

/// Run `n_episodes` episodes. Episode `i` draws its start state and policy
/// noise from stream `i` of a generator keyed by `seed`, so episodes are
/// independent of each other and of evaluation order.
pub fn evaluate(policy: &EvalPolicy<'_>, env: EnvKind, n_episodes: usize, seed: u64) -> Result<EvalReport> {
    ensure!(n_episodes >= 1, Contract, "evaluation needs at least one episode");
    let mut returns = Vec::with_capacity(n_episodes);
    let mut successes = Vec::with_capacity(n_episodes);
    let mut e = env.make();
    for i in 0..n_episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut s = e.reset(&mut rng);
        let mut total = 0.0;
        let mut success = false;
        loop {
            let a = policy(&s, &mut rng)?;
            let r = e.step(&a, &mut rng)?;
            total += r.reward;
            success |= r.success;
            if r.episode_over() {
                break;
            }
            s = r.next_state;
        }
        returns.push(total);
        successes.push(success);
    }
    let n = n_episodes as f64;
    Ok(EvalReport {
        success_rate: successes.iter().filter(|&&s| s).count() as f64 / n,
        mean_return: returns.iter().sum::<f64>() / n,
        returns,
        successes,
    })
}

/// Mean success rate over the last three evaluation epochs (fewer if the
/// run had fewer).
pub fn final_score(rows: &[MetricsRow]) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let tail = &rows[rows.len().saturating_sub(3)..];
    Some(tail.iter().map(|r| r.eval_success_rate).sum::<f64>() / tail.len() as f64)
}

#[derive(Debug)]
pub struct RunOutput {
    pub agent: Agent,
    pub rows: Vec<MetricsRow>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

/// Seed offset for evaluation episodes, fixed across epochs so every epoch
/// scores the same start states.
const EVAL_SEED_OFFSET: u64 = 1_000_003;

fn dump_batch(path: &Path, batch: &Batch) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let sd = batch.states.cols();
    let ad = batch.actions.cols();
    let mut header: Vec<String> = (0..sd).map(|i| format!("s{i}")).collect();
    header.extend((0..ad).map(|i| format!("a{i}")));
    header.push("reward".into());
    header.extend((0..sd).map(|i| format!("next_s{i}")));
    header.push("done".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for r in 0..batch.len() {
        let mut rec: Vec<String> = batch.states.row_slice(r).iter().map(f64::to_string).collect();
        rec.extend(batch.actions.row_slice(r).iter().map(f64::to_string));
        rec.push(batch.rewards[r].to_string());
        rec.extend(batch.next_states.row_slice(r).iter().map(f64::to_string));
        rec.push(u8::from(batch.dones[r]).to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train `config.variant` on `dataset`, then continue online.
///
/// Writes `metrics.csv`, `checkpoint.bin` and the resolved `config.conf`
/// into `out_dir`. Each gradient step runs the agent's update blocks in
/// order; during the online phase one exploratory environment step is taken
/// and stored before the batch is drawn.
pub fn train(config: &AgentConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunOutput> {
    config.validate()?;
    ensure!(
        dataset.env == config.env,
        Config,
        "dataset was generated for `{}` but the config asks for `{}`",
        dataset.env,
        config.env
    );
    ensure!(!dataset.is_empty(), Config, "dataset is empty");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let config_path = out_dir.join("config.conf");
    fs::write(&config_path, config.to_text()).map_err(|e| Error::io(&config_path, e))?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut env_rng = ChaCha8Rng::seed_from_u64(config.seed);
    env_rng.set_stream(2);
    let mut oracle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    oracle_rng.set_stream(3);

    let mut agent = make_variant(config, dataset.state_dim, dataset.action_dim, &mut init_rng)?;
    let mut buffer = ReplayBuffer::with_offline(config.resolved_capacity(dataset.len()), &dataset.transitions);
    let metrics_path = out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let oracle =
        if config.env == EnvKind::Chain && config.oracle_rollouts > 0 && (agent.main_critic.is_some() || agent.flow_critic.is_some()) {
            Some(ChainOracle::new(config.gamma, config.oracle_rollouts))
        } else {
            None
        };

    let mut env = config.env.make();
    let mut state = env.reset(&mut env_rng);
    let total = config.offline_steps + config.online_steps;
    let mut acc = Accumulator::default();
    let mut rows = Vec::new();
    for step in 1..=total {
        let phase = if step <= config.offline_steps {
            Phase::Offline
        } else {
            Phase::Online
        };
        if phase == Phase::Online {
            let action = explore_action(&agent.actor, &state, config.delta, &mut env_rng)?;
            let r = env.step(&action, &mut env_rng)?;
            buffer.append(Transition {
                state: state.clone(),
                action,
                reward: r.reward,
                next_state: r.next_state.clone(),
                done: r.terminal,
            });
            state = if r.episode_over() { env.reset(&mut env_rng) } else { r.next_state };
        }
        let batch = buffer.sample(config.batch_size, &mut rng)?;
        let stats = match agent.train_step(&batch, &mut rng) {
            Ok(s) => s,
            Err(Error::Numeric(msg)) => {
                let dump = out_dir.join(format!("nan_batch_step{step}.csv"));
                dump_batch(&dump, &batch)?;
                return Err(Error::Numeric(format!(
                    "step {step}: {msg}; offending batch written to {}",
                    dump.display()
                )));
            }
            Err(e) => return Err(e),
        };
        acc.push(&stats);

        if step % config.eval_interval == 0 || step == total {
            let report = evaluate(
                &|s: &[f64], r: &mut dyn RngCore| agent.act(s, r),
                config.env,
                config.eval_episodes,
                config.seed.wrapping_add(EVAL_SEED_OFFSET),
            )?;
            let w1 = match &oracle {
                Some(o) => Some(o.mean_w1(&agent, &chain_probes(), &mut oracle_rng)?),
                None => None,
            };
            let row = acc.row(step, phase, report.success_rate, report.mean_return, w1);
            writer.append(&row)?;
            rows.push(row);
        }
    }

    let checkpoint_path = out_dir.join("checkpoint.bin");
    agent.checkpoint().write(&checkpoint_path)?;
    Ok(RunOutput {
        agent,
        rows,
        metrics_path,
        checkpoint_path,
    })
}

/// Parse a metrics file back into rows.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let table = super::plot::read_table(path)?;
    let col = |name: &str| table.header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::parse(path, 1, format!("missing column `{name}`")));
    let idx: Vec<usize> = METRICS_HEADER.iter().map(|h| need(h)).collect::<Result<_>>()?;
    table
        .rows
        .iter()
        .map(|r| {
            let f = |k: usize| r.values[idx[k]];
            let req = |k: usize| f(k).ok_or_else(|| Error::parse(path, r.line, format!("empty `{}`", METRICS_HEADER[k])));
            Ok(MetricsRow {
                step: r.step,
                phase: r.phase,
                eval_success_rate: req(2)?,
                eval_mean_return: req(3)?,
                flow_critic: f(4),
                main_critic: f(5),
                bc_flow: req(6)?,
                actor: req(7)?,
                distill: req(8)?,
                q_mean: req(9)?,
                actor_grad_norm: req(10)?,
                actor_grad_norm_var: req(11)?,
                w1_to_oracle: f(12),
            })
        })
        .collect()
}
