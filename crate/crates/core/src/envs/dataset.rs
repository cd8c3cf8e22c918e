//! Scripted behavior datasets and their on-disk format.
//!
//! A dataset file is a text header followed by little-endian `f64` records:
//!
//! ```text
//! dfc-dataset 1
//! fields state,action,reward,next_state,done
//! state_dim <n>
//! action_dim <n>
//! count <n>
//! end
//! ```
//!
//! Each record is `state, action, reward, next_state, done (0.0 or 1.0)`.
//! A sidecar `<file>.meta` records the environment, behavior mix and seed.

use std::fmt;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EnvKind, Transition};
use crate::error::{Error, Result};

/// Behavior policies used to populate offline datasets.
#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedPolicy {
    /// Maze: pass the obstacle on the left, then head for the left goal.
    AroundLeft,
    /// Maze: mirror image of [`ScriptedPolicy::AroundLeft`].
    AroundRight,
    /// Uniform over the action box.
    Uniform,
    /// The same action everywhere.
    Constant(Vec<f64>),
}

/// Cap on the largest action component emitted by the maze scripts.
const MAZE_SPEED: f64 = 0.7;

impl ScriptedPolicy {
    pub fn act(&self, state: &[f64], action_dim: usize, noise_std: f64, rng: &mut dyn RngCore) -> Vec<f64> {
        let mut a = match self {
            ScriptedPolicy::Uniform => return (0..action_dim).map(|_| rng.gen_range(-1.0..=1.0)).collect(),
            ScriptedPolicy::Constant(a) => a.clone(),
            ScriptedPolicy::AroundLeft => maze_script(state, -1.0),
            ScriptedPolicy::AroundRight => maze_script(state, 1.0),
        };
        if noise_std > 0.0 {
            for v in &mut a {
                *v += noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        a.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
    }

    fn name(&self) -> String {
        match self {
            ScriptedPolicy::AroundLeft => "around_left".into(),
            ScriptedPolicy::AroundRight => "around_right".into(),
            ScriptedPolicy::Uniform => "uniform".into(),
            ScriptedPolicy::Constant(a) => {
                let parts: Vec<String> = a.iter().map(f64::to_string).collect();
                format!("constant[{}]", parts.join(" "))
            }
        }
    }
}

/// Waypoint beside the obstacle, then the goal on the same side, for the
/// default maze layout. `side` is -1 (left) or +1 (right).
fn maze_script(state: &[f64], side: f64) -> Vec<f64> {
    let (x, y) = (state[0], state[1]);
    let target = if y < 0.0 && x * side < 0.3 {
        [0.4 * side, 0.0]
    } else {
        [0.6 * side, 0.7]
    };
    let step = [(target[0] - x) / 0.2, (target[1] - y) / 0.2];
    let m = step[0].abs().max(step[1].abs());
    let scale = if m > MAZE_SPEED { MAZE_SPEED / m } else { 1.0 };
    vec![step[0] * scale, step[1] * scale]
}

/// Mixture of scripted policies; each episode draws one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorMix {
    pub policies: Vec<(ScriptedPolicy, f64)>,
    /// Gaussian noise added to scripted (non-uniform) actions before clipping.
    pub noise_std: f64,
}

impl BehaviorMix {
    pub fn single(policy: ScriptedPolicy) -> Self {
        Self {
            policies: vec![(policy, 1.0)],
            noise_std: 0.0,
        }
    }

    /// 45% left, 45% right, 10% uniform noise.
    pub fn maze_default() -> Self {
        Self {
            policies: vec![
                (ScriptedPolicy::AroundLeft, 0.45),
                (ScriptedPolicy::AroundRight, 0.45),
                (ScriptedPolicy::Uniform, 0.10),
            ],
            noise_std: 0.1,
        }
    }

    fn pick(&self, rng: &mut dyn RngCore) -> &ScriptedPolicy {
        let total: f64 = self.policies.iter().map(|p| p.1).sum();
        let mut u = rng.gen::<f64>() * total;
        for (p, w) in &self.policies {
            if u < *w {
                return p;
            }
            u -= w;
        }
        &self.policies.last().expect("non-empty mix").0
    }
}

impl fmt::Display for BehaviorMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.policies.iter().map(|(p, w)| format!("{}:{}", p.name(), w)).collect();
        write!(f, "{};noise={}", parts.join(","), self.noise_std)
    }
}

impl FromStr for BehaviorMix {
    type Err = Error;

    /// `around_left:0.45,around_right:0.45,uniform:0.1;noise=0.1`
    fn from_str(s: &str) -> Result<Self> {
        let (mix, noise) = match s.split_once(";noise=") {
            Some((m, n)) => (m, n.parse().map_err(|_| Error::Config(format!("bad noise level in `{s}`")))?),
            None => (s, 0.0),
        };
        let mut policies = Vec::new();
        for part in mix.split(',') {
            let (name, w) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("mix entry `{part}` needs name:weight")))?;
            let w: f64 = w.parse().map_err(|_| Error::Config(format!("bad weight in `{part}`")))?;
            let p = match name {
                "around_left" => ScriptedPolicy::AroundLeft,
                "around_right" => ScriptedPolicy::AroundRight,
                "uniform" => ScriptedPolicy::Uniform,
                c if c.starts_with("constant[") && c.ends_with(']') => ScriptedPolicy::Constant(
                    c[9..c.len() - 1]
                        .split(' ')
                        .map(|v| v.parse().map_err(|_| Error::Config(format!("bad constant action `{c}`"))))
                        .collect::<Result<_>>()?,
                ),
                other => return Err(Error::Config(format!("unknown scripted policy `{other}`"))),
            };
            policies.push((p, w));
        }
        if policies.iter().any(|p| p.1 < 0.0) || policies.iter().map(|p| p.1).sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("mix weights must be non-negative with positive sum: `{s}`")));
        }
        Ok(Self {
            policies,
            noise_std: noise,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env: EnvKind,
    pub mix: BehaviorMix,
    pub seed: u64,
    pub state_dim: usize,
    pub action_dim: usize,
    pub transitions: Vec<Transition>,
}

/// Roll out scripted episodes until `n_transitions` steps are collected.
pub fn generate_dataset(env: EnvKind, mix: &BehaviorMix, n_transitions: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut e = env.make();
    let (sd, ad) = (e.state_dim(), e.action_dim());
    let mut transitions = Vec::with_capacity(n_transitions);
    while transitions.len() < n_transitions {
        let policy = mix.pick(&mut rng).clone();
        let mut s = e.reset(&mut rng);
        loop {
            let a = policy.act(&s, ad, mix.noise_std, &mut rng);
            let r = e.step(&a, &mut rng).expect("scripted actions stay in the box");
            transitions.push(Transition {
                state: s,
                action: a,
                reward: r.reward,
                next_state: r.next_state.clone(),
                done: r.terminal,
            });
            if r.episode_over() || transitions.len() == n_transitions {
                break;
            }
            s = r.next_state;
        }
    }
    Dataset {
        env,
        mix: mix.clone(),
        seed,
        state_dim: sd,
        action_dim: ad,
        transitions,
    }
}

const MAGIC: &str = "dfc-dataset 1";

pub fn meta_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{MAGIC}\nfields state,action,reward,next_state,done\nstate_dim {}\naction_dim {}\ncount {}\nend\n",
            self.state_dim,
            self.action_dim,
            self.transitions.len()
        );
        let mut out = header.into_bytes();
        for t in &self.transitions {
            let vals = t
                .state
                .iter()
                .chain(&t.action)
                .chain(std::iter::once(&t.reward))
                .chain(&t.next_state)
                .chain(std::iter::once(if t.done { &1.0 } else { &0.0 }));
            for v in vals {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn meta_text(&self) -> String {
        format!(
            "env = {}\nmix = {}\nseed = {}\ncount = {}\n",
            self.env,
            self.mix,
            self.seed,
            self.transitions.len()
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let meta = meta_path(path);
        std::fs::write(&meta, self.meta_text()).map_err(|e| Error::io(&meta, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta = meta_path(path);
        let meta_text = std::fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
        let mut env = None;
        let mut mix = None;
        let mut seed = None;
        for (i, line) in meta_text.lines().enumerate() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v = v.trim();
            let bad = |e: String| Error::parse(&meta, i + 1, e);
            match k.trim() {
                "env" => env = Some(v.parse::<EnvKind>().map_err(|e| bad(e.to_string()))?),
                "mix" => mix = Some(v.parse::<BehaviorMix>().map_err(|e| bad(e.to_string()))?),
                "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(e.to_string()))?),
                _ => {}
            }
        }
        let missing = |what: &str| Error::parse(&meta, 0, format!("missing `{what}`"));
        let (env, mix, seed) = (
            env.ok_or_else(|| missing("env"))?,
            mix.ok_or_else(|| missing("mix"))?,
            seed.ok_or_else(|| missing("seed"))?,
        );

        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut dims = [None, None, None];
        let mut lineno = 0;
        loop {
            let mut line = String::new();
            lineno += 1;
            r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
            let l = line.trim_end();
            if lineno == 1 {
                if l != MAGIC {
                    return Err(Error::parse(path, 1, "missing dataset magic"));
                }
                continue;
            }
            if l == "end" {
                break;
            }
            if l.is_empty() {
                return Err(Error::parse(path, lineno, "unterminated header"));
            }
            let (k, v) = l
                .split_once(' ')
                .ok_or_else(|| Error::parse(path, lineno, "expected `key value`"))?;
            let slot = match k {
                "state_dim" => 0,
                "action_dim" => 1,
                "count" => 2,
                _ => continue,
            };
            dims[slot] = Some(v.parse::<usize>().map_err(|e| Error::parse(path, lineno, e.to_string()))?);
        }
        let [Some(sd), Some(ad), Some(n)] = dims else {
            return Err(Error::parse(path, lineno, "header lacks state_dim/action_dim/count"));
        };
        let width = 2 * sd + ad + 2;
        let mut buf = vec![0u8; n * width * 8];
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let transitions = vals
            .chunks_exact(width)
            .map(|rec| Transition {
                state: rec[..sd].to_vec(),
                action: rec[sd..sd + ad].to_vec(),
                reward: rec[sd + ad],
                next_state: rec[sd + ad + 1..2 * sd + ad + 1].to_vec(),
                done: rec[2 * sd + ad + 1] != 0.0,
            })
            .collect();
        Ok(Self {
            env,
            mix,
            seed,
            state_dim: sd,
            action_dim: ad,
            transitions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bytes() {
        let mix = BehaviorMix::maze_default();
        let a = generate_dataset(EnvKind::Maze, &mix, 2_000, 9);
        let b = generate_dataset(EnvKind::Maze, &mix, 2_000, 9);
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = generate_dataset(EnvKind::Maze, &mix, 2_000, 10);
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn single_policy_mix() {
        let mix = BehaviorMix::single(ScriptedPolicy::Constant(vec![0.25, -0.5]));
        let d = generate_dataset(EnvKind::Maze, &mix, 500, 0);
        assert_eq!(d.len(), 500);
        assert!(d.transitions.iter().all(|t| t.action == vec![0.25, -0.5]));
    }

    #[test]
    fn file_roundtrip() {
        let d = generate_dataset(EnvKind::Chain, &EnvKind::Chain.default_mix(), 300, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bin");
        d.write(&path).unwrap();
        assert_eq!(Dataset::read(&path).unwrap(), d);
        let meta = std::fs::read_to_string(meta_path(&path)).unwrap();
        assert!(meta.contains("env = chain") && meta.contains("seed = 3"));
    }

    #[test]
    fn mix_text_roundtrip() {
        let m = BehaviorMix::maze_default();
        assert_eq!(m.to_string().parse::<BehaviorMix>().unwrap(), m);
        let c = BehaviorMix::single(ScriptedPolicy::Constant(vec![0.5]));
        assert_eq!(c.to_string().parse::<BehaviorMix>().unwrap(), c);
        assert!("bogus:1".parse::<BehaviorMix>().is_err());
    }

    #[test]
    fn scripted_modes_reach_their_goals() {
        use crate::envs::{Env, TwoGoalMaze};
        for (policy, goal) in [(ScriptedPolicy::AroundLeft, 0), (ScriptedPolicy::AroundRight, 1)] {
            let mut env = TwoGoalMaze::default();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut s = env.reset(&mut rng);
            let mut steps = 0;
            loop {
                let r = env.step(&policy.act(&s, 2, 0.0, &mut rng), &mut rng).unwrap();
                steps += 1;
                if r.episode_over() {
                    assert!(r.success);
                    assert!(env.goals[goal].contains(env.position()));
                    break;
                }
                s = r.next_state;
            }
            assert!(steps <= 30, "{steps} steps");
        }
    }
}
