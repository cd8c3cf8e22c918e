use rand::{Rng, RngCore};

use super::{check_action, Env, StepResult};
use crate::error::{ensure, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Goal {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Goal {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        dx * dx + dy * dy <= self.radius * self.radius
    }
}

/// Point agent in `[-1, 1]^2` with a box obstacle between the start and two
/// mirror-image goals.
///
/// Actions in `[-1, 1]^2` are scaled by `max_displacement` (0.2). A move that
/// would end inside the obstacle leaves the agent where it was; moves past
/// the arena walls are clipped. Reward is `0` on the step that enters a goal
/// (which ends the episode) and `-1` otherwise.
#[derive(Debug, Clone)]
pub struct TwoGoalMaze {
    pub start: [f64; 2],
    pub start_jitter: f64,
    /// `[x_min, x_max, y_min, y_max]`
    pub obstacle: [f64; 4],
    pub goals: [Goal; 2],
    pub max_displacement: f64,
    pub max_steps: usize,
    pos: [f64; 2],
    steps: usize,
}

impl Default for TwoGoalMaze {
    fn default() -> Self {
        Self {
            start: [0.0, -0.7],
            start_jitter: 0.05,
            obstacle: [-0.15, 0.15, -0.2, 0.2],
            goals: [
                Goal {
                    center: [-0.6, 0.7],
                    radius: 0.15,
                },
                Goal {
                    center: [0.6, 0.7],
                    radius: 0.15,
                },
            ],
            max_displacement: 0.2,
            max_steps: 100,
            pos: [0.0, -0.7],
            steps: 0,
        }
    }
}

impl TwoGoalMaze {
    pub fn in_obstacle(&self, p: [f64; 2]) -> bool {
        let [x0, x1, y0, y1] = self.obstacle;
        p[0] >= x0 && p[0] <= x1 && p[1] >= y0 && p[1] <= y1
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn success(&self, p: [f64; 2]) -> bool {
        self.goals.iter().any(|g| g.contains(p))
    }
}

impl Env for TwoGoalMaze {
    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        let j = self.start_jitter;
        self.pos = if j > 0.0 {
            [self.start[0] + rng.gen_range(-j..=j), self.start[1] + rng.gen_range(-j..=j)]
        } else {
            self.start
        };
        self.steps = 0;
        self.pos.to_vec()
    }

    fn state(&self) -> Vec<f64> {
        self.pos.to_vec()
    }

    fn set_state(&mut self, state: &[f64]) -> Result<()> {
        ensure!(state.len() == 2, Shape, "maze state has {} dims, expected 2", state.len());
        let p = [state[0], state[1]];
        ensure!(
            p.iter().all(|v| (-1.0..=1.0).contains(v)) && !self.in_obstacle(p),
            Contract,
            "position {p:?} is not free space"
        );
        self.pos = p;
        self.steps = 0;
        Ok(())
    }

    fn step(&mut self, action: &[f64], _rng: &mut dyn RngCore) -> Result<StepResult> {
        check_action(action, 2)?;
        ensure!(self.steps < self.max_steps, State, "step after the episode's time limit");
        let d = self.max_displacement;
        let proposed = [
            (self.pos[0] + d * action[0]).clamp(-1.0, 1.0),
            (self.pos[1] + d * action[1]).clamp(-1.0, 1.0),
        ];
        if !self.in_obstacle(proposed) {
            self.pos = proposed;
        }
        self.steps += 1;
        let success = self.success(self.pos);
        Ok(StepResult {
            next_state: self.pos.to_vec(),
            reward: if success { 0.0 } else { -1.0 },
            terminal: success,
            truncated: !success && self.steps >= self.max_steps,
            success,
        })
    }

    fn reward_bound(&self) -> f64 {
        1.0
    }
}
