//! Desk-scale environments, scripted datasets and the replay buffer.

mod buffer;
mod chain;
pub mod dataset;
mod maze;

pub use buffer::ReplayBuffer;
pub use chain::{ChainMdp, RewardLaw};
pub use dataset::{generate_dataset, BehaviorMix, Dataset, ScriptedPolicy};
pub use maze::{Goal, TwoGoalMaze};

use std::fmt;
use std::str::FromStr;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// One environment step. `done` marks a true terminal state: the Bellman
/// target does not bootstrap past it. Time-limit truncation is not terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Column-stacked minibatch of transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Result<Self> {
        let items: Vec<&Transition> = items.into_iter().collect();
        let n = items.len();
        let (sd, ad) = items.first().map_or((0, 0), |t| (t.state.len(), t.action.len()));
        let mut states = Vec::with_capacity(n * sd);
        let mut actions = Vec::with_capacity(n * ad);
        let mut next_states = Vec::with_capacity(n * sd);
        let mut rewards = Vec::with_capacity(n);
        let mut dones = Vec::with_capacity(n);
        for t in items {
            states.extend_from_slice(&t.state);
            actions.extend_from_slice(&t.action);
            next_states.extend_from_slice(&t.next_state);
            rewards.push(t.reward);
            dones.push(t.done);
        }
        Ok(Self {
            states: Tensor::matrix(n, sd, states)?,
            actions: Tensor::matrix(n, ad, actions)?,
            rewards,
            next_states: Tensor::matrix(n, sd, next_states)?,
            dones,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True terminal state (no bootstrap).
    pub terminal: bool,
    /// Episode hit its step limit.
    pub truncated: bool,
    pub success: bool,
}

impl StepResult {
    pub fn episode_over(&self) -> bool {
        self.terminal || self.truncated
    }
}

/// Single-owner episodic environment with actions in `[-1, 1]^action_dim`.
pub trait Env {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn state(&self) -> Vec<f64>;
    /// Place the environment at an arbitrary state with a fresh step counter.
    fn set_state(&mut self, state: &[f64]) -> Result<()>;
    fn step(&mut self, action: &[f64], rng: &mut dyn RngCore) -> Result<StepResult>;
    /// Largest absolute per-step reward.
    fn reward_bound(&self) -> f64;
}

pub(crate) fn check_action(action: &[f64], dim: usize) -> Result<()> {
    if action.len() != dim {
        return Err(Error::Shape(format!("action has {} dims, expected {dim}", action.len())));
    }
    if let Some(a) = action.iter().find(|a| !(-1.0..=1.0).contains(*a)) {
        return Err(Error::Contract(format!("action component {a} outside [-1, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Chain,
    Maze,
}

impl EnvKind {
    pub fn make(self) -> Box<dyn Env> {
        match self {
            EnvKind::Chain => Box::new(ChainMdp::default()),
            EnvKind::Maze => Box::new(TwoGoalMaze::default()),
        }
    }

    pub fn default_mix(self) -> BehaviorMix {
        match self {
            EnvKind::Chain => BehaviorMix::single(ScriptedPolicy::Uniform),
            EnvKind::Maze => BehaviorMix::maze_default(),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EnvKind::Chain => "chain",
            EnvKind::Maze => "maze",
        })
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chain" => Ok(EnvKind::Chain),
            "maze" => Ok(EnvKind::Maze),
            other => Err(Error::Config(format!("unknown environment `{other}` (expected chain or maze)"))),
        }
    }
}
