//! Run configuration: a flat `key = value` text file.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::critic::QuantilePairing;
use crate::envs::EnvKind;
use crate::error::{Error, Result};

/// Agent assembly selected by the `variant` key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Target flow critic, distilled quantile critic, one-step actor.
    Dfc,
    /// Flow critic only; the actor differentiates through its Euler sampler.
    Fc,
    /// Quantile critic bootstrapping from its own EMA copy.
    Dc,
    /// Scalar critic with a squared Bellman error.
    Fql,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dfc, Variant::Fc, Variant::Dc, Variant::Fql];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Dfc => "dfc",
            Variant::Fc => "fc",
            Variant::Dc => "dc",
            Variant::Fql => "fql",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dfc" => Ok(Variant::Dfc),
            "fc" => Ok(Variant::Fc),
            "dc" => Ok(Variant::Dc),
            "fql" => Ok(Variant::Fql),
            other => Err(Error::Config(format!("unknown variant `{other}` (expected dfc, fc, dc or fql)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentConfig {
    pub variant: Variant,
    pub env: EnvKind,
    pub seed: u64,
    /// Dataset file; `None` means `<out-dir>/<env>.dataset`.
    pub dataset: Option<PathBuf>,
    pub dataset_size: usize,
    pub dataset_seed: u64,
    /// Return samples per state-action pair.
    pub m: usize,
    pub kappa: f64,
    pub gamma: f64,
    pub alpha: f64,
    pub delta: f64,
    pub lr_flow_critic: f64,
    pub lr_critic: f64,
    /// Shared by the one-step actor and the BC flow policy.
    pub lr_actor: f64,
    pub ema: f64,
    pub batch_size: usize,
    pub flow_steps: usize,
    pub hidden: Vec<usize>,
    pub pairing: QuantilePairing,
    pub normalize_q: bool,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// 0 sizes the buffer to hold the dataset plus every online transition.
    pub buffer_capacity: usize,
    /// Monte-Carlo rollouts per probe for the chain `w1_to_oracle` column;
    /// 0 disables it.
    pub oracle_rollouts: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dfc,
            env: EnvKind::Maze,
            seed: 0,
            dataset: None,
            dataset_size: 100_000,
            dataset_seed: 0,
            m: 51,
            kappa: 1.0,
            gamma: 0.99,
            alpha: 10.0,
            delta: 0.3,
            lr_flow_critic: 1e-4,
            lr_critic: 3e-4,
            lr_actor: 3e-4,
            ema: 0.005,
            batch_size: 256,
            flow_steps: 10,
            hidden: vec![64, 64],
            pairing: QuantilePairing::SortedSamples,
            normalize_q: false,
            offline_steps: 50_000,
            online_steps: 50_000,
            eval_interval: 5_000,
            eval_episodes: 50,
            buffer_capacity: 0,
            oracle_rollouts: 10_000,
        }
    }
}

const KEYS: &[&str] = &[
    "variant",
    "env",
    "seed",
    "dataset",
    "dataset_size",
    "dataset_seed",
    "m",
    "kappa",
    "gamma",
    "alpha",
    "delta",
    "lr_flow_critic",
    "lr_critic",
    "lr_actor",
    "ema",
    "batch_size",
    "flow_steps",
    "hidden",
    "pairing",
    "normalize_q",
    "offline_steps",
    "online_steps",
    "eval_interval",
    "eval_episodes",
    "buffer_capacity",
    "oracle_rollouts",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_pairing(value: &str) -> Result<QuantilePairing> {
    match value {
        "sorted" => Ok(QuantilePairing::SortedSamples),
        "grid" => Ok(QuantilePairing::NoiseGrid),
        other => Err(Error::Config(format!("`pairing`: expected sorted or grid, got `{other}`"))),
    }
}

fn pairing_name(p: QuantilePairing) -> &'static str {
    match p {
        QuantilePairing::SortedSamples => "sorted",
        QuantilePairing::NoiseGrid => "grid",
    }
}

impl AgentConfig {
    /// Override a single field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "variant" => self.variant = v.parse()?,
            "env" => self.env = v.parse()?,
            "seed" => self.seed = parse_value(key, v)?,
            "dataset" => self.dataset = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "dataset_size" => self.dataset_size = parse_value(key, v)?,
            "dataset_seed" => self.dataset_seed = parse_value(key, v)?,
            "m" => self.m = parse_value(key, v)?,
            "kappa" => self.kappa = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "delta" => self.delta = parse_value(key, v)?,
            "lr_flow_critic" => self.lr_flow_critic = parse_value(key, v)?,
            "lr_critic" => self.lr_critic = parse_value(key, v)?,
            "lr_actor" => self.lr_actor = parse_value(key, v)?,
            "ema" => self.ema = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "flow_steps" => self.flow_steps = parse_value(key, v)?,
            "hidden" => self.hidden = v.split(',').map(|w| parse_value::<usize>(key, w.trim())).collect::<Result<_>>()?,
            "pairing" => self.pairing = parse_pairing(v)?,
            "normalize_q" => self.normalize_q = parse_value(key, v)?,
            "offline_steps" => self.offline_steps = parse_value(key, v)?,
            "online_steps" => self.online_steps = parse_value(key, v)?,
            "eval_interval" => self.eval_interval = parse_value(key, v)?,
            "eval_episodes" => self.eval_episodes = parse_value(key, v)?,
            "buffer_capacity" => self.buffer_capacity = parse_value(key, v)?,
            "oracle_rollouts" => self.oracle_rollouts = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn parse_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::parse(origin, i + 1, format!("expected `key = value`, got `{line}`")));
            };
            cfg.set(key.trim(), value).map_err(|e| Error::parse(origin, i + 1, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.m == 0 {
            return fail("`m` must be at least 1".into());
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return fail(format!("`kappa` must be positive, got {}", self.kappa));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("`gamma` must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("`alpha` must be non-negative, got {}", self.alpha));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return fail(format!("`delta` must be non-negative, got {}", self.delta));
        }
        for (k, lr) in [
            ("lr_flow_critic", self.lr_flow_critic),
            ("lr_critic", self.lr_critic),
            ("lr_actor", self.lr_actor),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("`{k}` must be positive, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return fail(format!("`ema` must lie in [0, 1], got {}", self.ema));
        }
        if self.batch_size == 0 {
            return fail("`batch_size` must be at least 1".into());
        }
        if self.flow_steps == 0 {
            return fail("`flow_steps` must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return fail(format!("`hidden` needs positive widths, got {:?}", self.hidden));
        }
        if self.eval_interval == 0 {
            return fail("`eval_interval` must be at least 1".into());
        }
        if self.eval_episodes == 0 {
            return fail("`eval_episodes` must be at least 1".into());
        }
        if self.dataset_size == 0 {
            return fail("`dataset_size` must be at least 1".into());
        }
        Ok(())
    }

    /// Buffer capacity after resolving the automatic setting.
    pub fn resolved_capacity(&self, dataset_len: usize) -> usize {
        if self.buffer_capacity == 0 {
            dataset_len + self.online_steps
        } else {
            self.buffer_capacity
        }
    }

    /// Text form accepted by [`AgentConfig::parse_str`]; floats round-trip.
    pub fn to_text(&self) -> String {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let dataset = self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let values: Vec<String> = vec![
            self.variant.to_string(),
            self.env.to_string(),
            self.seed.to_string(),
            dataset,
            self.dataset_size.to_string(),
            self.dataset_seed.to_string(),
            self.m.to_string(),
            self.kappa.to_string(),
            self.gamma.to_string(),
            self.alpha.to_string(),
            self.delta.to_string(),
            self.lr_flow_critic.to_string(),
            self.lr_critic.to_string(),
            self.lr_actor.to_string(),
            self.ema.to_string(),
            self.batch_size.to_string(),
            self.flow_steps.to_string(),
            hidden.join(","),
            pairing_name(self.pairing).to_string(),
            self.normalize_q.to_string(),
            self.offline_steps.to_string(),
            self.online_steps.to_string(),
            self.eval_interval.to_string(),
            self.eval_episodes.to_string(),
            self.buffer_capacity.to_string(),
            self.oracle_rollouts.to_string(),
        ];
        KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
