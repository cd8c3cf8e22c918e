use rand::{Rng, RngCore};

use super::{check_action, Env, StepResult};
use crate::error::{ensure, Result};

/// Discrete reward distribution: `(value, probability)` atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardLaw(pub Vec<(f64, f64)>);

impl RewardLaw {
    pub fn constant(v: f64) -> Self {
        Self(vec![(v, 1.0)])
    }

    pub fn bernoulli(p: f64, value: f64) -> Self {
        Self(vec![(0.0, 1.0 - p), (value, p)])
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().map(|(v, p)| v * p).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|(v, _)| v.abs()).fold(0.0, f64::max)
    }

    fn sample(&self, rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for &(v, p) in &self.0 {
            acc += p;
            if u < acc {
                return v;
            }
        }
        self.0.last().map_or(0.0, |a| a.0)
    }
}

/// Deterministic left-to-right chain `0 -> 1 -> ... -> n-1 -> end` with
/// stochastic rewards. The sign of the scalar action picks the reward law:
/// `a >= 0` draws from the risky law, `a < 0` from the safe one. States are
/// one-hot; the terminal successor is the zero vector.
#[derive(Debug, Clone)]
pub struct ChainMdp {
    pub risky: Vec<RewardLaw>,
    pub safe: Vec<RewardLaw>,
    current: usize,
}

impl Default for ChainMdp {
    fn default() -> Self {
        Self::new(3)
    }
}

impl ChainMdp {
    /// Risky edges pay Bernoulli(0.5) in {0, 1}; safe edges pay 0.5.
    pub fn new(n_states: usize) -> Self {
        Self {
            risky: vec![RewardLaw::bernoulli(0.5, 1.0); n_states],
            safe: vec![RewardLaw::constant(0.5); n_states],
            current: 0,
        }
    }

    pub fn n_states(&self) -> usize {
        self.risky.len()
    }

    /// Episodes always last exactly `n_states` steps.
    pub fn horizon(&self) -> usize {
        self.n_states()
    }

    /// Row `s` of the transition kernel over `n_states + 1` outcomes, the
    /// last being the terminal.
    pub fn transition_row(&self, s: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states() + 1];
        row[s + 1] = 1.0;
        row
    }

    pub fn one_hot(&self, s: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states()];
        if s < v.len() {
            v[s] = 1.0;
        }
        v
    }

    pub fn law(&self, s: usize, action: f64) -> &RewardLaw {
        if action >= 0.0 {
            &self.risky[s]
        } else {
            &self.safe[s]
        }
    }
}

impl Env for ChainMdp {
    fn state_dim(&self) -> usize {
        self.n_states()
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, _rng: &mut dyn RngCore) -> Vec<f64> {
        self.current = 0;
        self.one_hot(0)
    }

    fn state(&self) -> Vec<f64> {
        self.one_hot(self.current)
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        ensure!(
            state.len() == self.n_states(),
            Shape,
            "chain state has {} dims, expected {}",
            state.len(),
            self.n_states()
        );
        let hot: Vec<usize> = (0..state.len()).filter(|&i| state[i] == 1.0).collect();
        ensure!(
            hot.len() == 1 && state.iter().filter(|&&v| v != 0.0).count() == 1,
            Contract,
            "chain state must be one-hot, got {state:?}"
        );
        self.current = hot[0];
        Ok(())
    }

    fn step(&mut self, action: &[f64], rng: &mut dyn RngCore) -> Result<StepResult> {
        check_action(action, 1)?;
        ensure!(self.current < self.n_states(), State, "step after the chain terminated");
        let reward = self.law(self.current, action[0]).sample(rng);
        self.current += 1;
        let terminal = self.current == self.n_states();
        Ok(StepResult {
            next_state: self.one_hot(self.current),
            reward,
            terminal,
            truncated: false,
            success: terminal,
        })
    }

    fn reward_bound(&self) -> f64 {
        self.risky.iter().chain(&self.safe).map(RewardLaw::max_abs).fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bernoulli_edge_frequency() {
        let mut env = ChainMdp::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for _ in 0..10_000 {
            env.set_state(&[1.0, 0.0, 0.0]).unwrap();
            total += env.step(&[0.5], &mut rng).unwrap().reward;
        }
        let mean = total / 10_000.0;
        assert!((0.48..=0.52).contains(&mean), "{mean}");
    }

    #[test]
    fn kernel_rows_sum_to_one() {
        let env = ChainMdp::new(4);
        for s in 0..4 {
            assert_eq!(env.transition_row(s).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn episode_runs_the_chain() {
        let mut env = ChainMdp::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        env.reset(&mut rng);
        let r1 = env.step(&[-1.0], &mut rng).unwrap();
        assert_eq!(r1.reward, 0.5);
        assert!(!r1.terminal);
        env.step(&[-1.0], &mut rng).unwrap();
        let r3 = env.step(&[-1.0], &mut rng).unwrap();
        assert!(r3.terminal);
        assert_eq!(r3.next_state, vec![0.0; 3]);
        assert!(env.step(&[0.0], &mut rng).is_err());
    }

    #[test]
    fn out_of_box_action_is_rejected() {
        let mut env = ChainMdp::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(env.step(&[1.5], &mut rng), Err(crate::Error::Contract(_))));
    }
}
