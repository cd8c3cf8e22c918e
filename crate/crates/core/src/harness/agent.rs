//! Agent assembly for the four variants and the per-step update schedule.

use rand::{Rng, RngCore};

use super::config::{AgentConfig, Variant};
use crate::critic::{
    bellman_targets, quantile_levels, sample_main, ActionValue, MainCritic, MeanReturn, QuantileLevels, ReturnSampler, TargetFlowCritic,
};
use crate::envs::Batch;
use crate::error::{ensure, Error, Result};
use crate::flow::{euler_sample_on, VectorFieldNet};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{ema_update, AdamState, Graph, Mlp, Tensor, Var};
use crate::policy::{gaussian, BcFlowPolicy, OneStepPolicy};

/// Scalar `Q(s, a)` critic with an EMA target copy.
#[derive(Debug, Clone)]
pub struct ScalarCritic {
    pub net: Mlp,
    pub target: Mlp,
    pub opt: AdamState,
}

impl ScalarCritic {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], lr: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let net = Mlp::new(&dims, rng)?;
        let opt = AdamState::new(net.param_count(), lr);
        Ok(Self {
            target: net.clone(),
            net,
            opt,
        })
    }

    /// `[B, 1]` values from the target copy, no tape.
    pub fn target_values(&self, states: &Tensor, actions: &Tensor) -> Result<Tensor> {
        self.target.forward(&Tensor::concat_cols(&[states, actions])?)
    }

    /// One Adam step on the mean squared Bellman error.
    pub fn train_step(&mut self, states: &Tensor, actions: &Tensor, targets: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, true);
        let loss = mse_bellman_loss(&mut g, &self.net, &bound, states, actions, targets)?;
        let value = g.scalar_value(loss);
        g.backward(loss)?;
        self.opt.step(self.net.params_mut(), &bound.grads(&g))?;
        Ok(value)
    }
}

/// `mean_b (Q(s_b, a_b) - y_b)^2` for a `[B, 1]` target column.
pub fn mse_bellman_loss(
    graph: &mut Graph,
    net: &Mlp,
    bound: &crate::nn::BoundMlp,
    states: &Tensor,
    actions: &Tensor,
    targets: &Tensor,
) -> Result<Var> {
    ensure!(
        targets.shape() == [states.rows(), 1],
        Shape,
        "targets {:?} for {} rows",
        targets.shape(),
        states.rows()
    );
    ensure!(targets.is_finite(), Numeric, "non-finite Bellman target");
    ensure!(net.output_dim() == 1, Shape, "scalar critic must output one value");
    let x = graph.constant(Tensor::concat_cols(&[states, actions])?);
    let q = bound.forward(graph, x)?;
    let y = graph.constant(targets.clone());
    let d = graph.sub(q, y)?;
    let sq = graph.square(d);
    Ok(graph.mean(sq))
}

/// Actor view of a scalar critic.
pub struct ScalarQ<'a>(pub &'a Mlp);

impl ActionValue for ScalarQ<'_> {
    fn q_on(&self, graph: &mut Graph, states: Var, actions: Var, _rng: &mut dyn RngCore) -> Result<Var> {
        let bound = self.0.bind(graph, false);
        let x = graph.concat_cols(&[states, actions])?;
        bound.forward(graph, x)
    }
}

/// Actor view of a flow critic: the mean of `m` Euler-sampled returns, with
/// the action gradient taken through every integration step.
pub struct FlowMeanReturn<'a> {
    pub field: &'a VectorFieldNet,
    pub n_steps: usize,
    pub m: usize,
}

impl ActionValue for FlowMeanReturn<'_> {
    fn q_on(&self, graph: &mut Graph, states: Var, actions: Var, rng: &mut dyn RngCore) -> Result<Var> {
        let rows = graph.value(states).rows();
        let s = graph.repeat_rows(states, self.m);
        let a = graph.repeat_rows(actions, self.m);
        let cond = graph.concat_cols(&[s, a])?;
        let x0 = graph.constant(gaussian(rows * self.m, 1, rng));
        let bound = self.field.net.bind(graph, false);
        let z = euler_sample_on(graph, self.field, &bound, cond, x0, self.n_steps)?;
        let z = graph.reshape(z, vec![rows, self.m])?;
        Ok(graph.mean_cols(z))
    }
}

/// Bootstrap sampler over a frozen main-critic network.
struct FrozenMain<'a>(&'a Mlp);

impl ReturnSampler for FrozenMain<'_> {
    fn sample_returns(&self, states: &Tensor, actions: &Tensor, noise: &Tensor) -> Result<Tensor> {
        sample_main(self.0, states, actions, noise)
    }
}

/// The update blocks of one gradient step, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    FlowCritic,
    MainCritic,
    BcFlow,
    Actor,
    Ema,
}

/// Losses and diagnostics from one gradient step. Components a variant does
/// not have are `None`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepStats {
    pub flow_critic: Option<f64>,
    pub main_critic: Option<f64>,
    pub bc_flow: f64,
    pub actor: f64,
    pub distill: f64,
    pub q_mean: f64,
    pub actor_grad_norm: f64,
}

impl StepStats {
    pub fn is_finite(&self) -> bool {
        [self.flow_critic, self.main_critic]
            .iter()
            .flatten()
            .chain(&[self.bc_flow, self.actor, self.distill, self.q_mean, self.actor_grad_norm])
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub variant: Variant,
    pub flow_critic: Option<TargetFlowCritic>,
    pub main_critic: Option<MainCritic>,
    /// EMA copy of the main critic (DC only).
    pub main_target: Option<Mlp>,
    pub scalar_critic: Option<ScalarCritic>,
    pub levels: Option<QuantileLevels>,
    pub bc: BcFlowPolicy,
    pub actor: OneStepPolicy,
    m: usize,
    kappa: f64,
    gamma: f64,
    alpha: f64,
    ema: f64,
    normalize_q: bool,
    pairing: crate::critic::QuantilePairing,
    /// When set, every executed update block is appended here.
    pub trace: Option<Vec<Stage>>,
}

/// Build the networks `config.variant` calls for.
pub fn make_variant(config: &AgentConfig, state_dim: usize, action_dim: usize, rng: &mut impl Rng) -> Result<Agent> {
    config.validate()?;
    let h = &config.hidden;
    let (sd, ad) = (state_dim, action_dim);
    let needs_flow = matches!(config.variant, Variant::Dfc | Variant::Fc);
    let needs_main = matches!(config.variant, Variant::Dfc | Variant::Dc);
    let flow_critic = if needs_flow {
        Some(TargetFlowCritic::new(sd, ad, h, config.lr_flow_critic, config.flow_steps, rng)?)
    } else {
        None
    };
    let main_critic = if needs_main {
        Some(MainCritic::new(sd, ad, h, config.lr_critic, rng)?)
    } else {
        None
    };
    let main_target = match (&main_critic, config.variant) {
        (Some(mc), Variant::Dc) => Some(mc.net.clone()),
        _ => None,
    };
    let scalar_critic = if config.variant == Variant::Fql {
        Some(ScalarCritic::new(sd, ad, h, config.lr_critic, rng)?)
    } else {
        None
    };
    let levels = if needs_main { Some(quantile_levels(config.m)?) } else { None };
    let bc = BcFlowPolicy::new(sd, ad, h, config.lr_actor, config.flow_steps, rng)?;
    let actor = OneStepPolicy::new(sd, ad, h, config.lr_actor, rng)?;
    Ok(Agent {
        variant: config.variant,
        flow_critic,
        main_critic,
        main_target,
        scalar_critic,
        levels,
        bc,
        actor,
        m: config.m,
        kappa: config.kappa,
        gamma: config.gamma,
        alpha: config.alpha,
        ema: config.ema,
        normalize_q: config.normalize_q,
        pairing: config.pairing,
        trace: None,
    })
}

fn missing(what: &str) -> Error {
    Error::State(format!("agent has no {what}"))
}

impl Agent {
    fn mark(&mut self, stage: Stage) {
        if let Some(t) = &mut self.trace {
            t.push(stage);
        }
    }

    /// Critic updates toward Bellman targets built from `next_actions`.
    /// Returns `(flow_critic_loss, main_critic_loss)`.
    pub fn critic_update(
        &mut self,
        batch: &Batch,
        next_actions: &Tensor,
        rng: &mut (impl RngCore + ?Sized),
    ) -> Result<(Option<f64>, Option<f64>)> {
        let (m, gamma) = (self.m, self.gamma);
        match self.variant {
            Variant::Dfc | Variant::Fc => {
                let fc = self.flow_critic.as_mut().ok_or_else(|| missing("flow critic"))?;
                let bt = bellman_targets(batch, next_actions, &*fc, m, gamma, rng)?;
                let taus: Vec<f64> = (0..batch.len()).map(|_| rng.gen::<f64>()).collect();
                let flow_loss = fc.train_step(&batch.states, &batch.actions, &bt, &Tensor::column(&taus))?;
                self.mark(Stage::FlowCritic);
                if self.variant == Variant::Fc {
                    return Ok((Some(flow_loss), None));
                }
                let levels = self.levels.as_ref().ok_or_else(|| missing("quantile levels"))?;
                let mc = self.main_critic.as_mut().ok_or_else(|| missing("main critic"))?;
                let main_loss = mc.distill_step(&batch.states, &batch.actions, &bt.targets, levels, self.kappa, self.pairing, rng)?;
                self.mark(Stage::MainCritic);
                Ok((Some(flow_loss), Some(main_loss)))
            }
            Variant::Dc => {
                let target = self.main_target.as_ref().ok_or_else(|| missing("main target"))?;
                let bt = bellman_targets(batch, next_actions, &FrozenMain(target), m, gamma, rng)?;
                let levels = self.levels.as_ref().ok_or_else(|| missing("quantile levels"))?;
                let mc = self.main_critic.as_mut().ok_or_else(|| missing("main critic"))?;
                let main_loss = mc.distill_step(&batch.states, &batch.actions, &bt.targets, levels, self.kappa, self.pairing, rng)?;
                self.mark(Stage::MainCritic);
                Ok((None, Some(main_loss)))
            }
            Variant::Fql => {
                let sc = self.scalar_critic.as_mut().ok_or_else(|| missing("scalar critic"))?;
                let next_q = sc.target_values(&batch.next_states, next_actions)?;
                let y: Vec<f64> = (0..batch.len())
                    .map(|r| {
                        let cont = if batch.dones[r] { 0.0 } else { gamma };
                        batch.rewards[r] + cont * next_q.data()[r]
                    })
                    .collect();
                let loss = sc.train_step(&batch.states, &batch.actions, &Tensor::column(&y))?;
                self.mark(Stage::MainCritic);
                Ok((None, Some(loss)))
            }
        }
    }

    /// Move every target network toward its online counterpart.
    pub fn target_update(&mut self) -> Result<()> {
        if let Some(fc) = &mut self.flow_critic {
            fc.update_target_ema(self.ema)?;
        }
        if let (Some(t), Some(mc)) = (&mut self.main_target, &self.main_critic) {
            ema_update(t, &mc.net, self.ema)?;
        }
        if let Some(sc) = &mut self.scalar_critic {
            ema_update(&mut sc.target, &sc.net, self.ema)?;
        }
        self.mark(Stage::Ema);
        Ok(())
    }

    /// One full gradient step: critics, BC flow policy, one-step actor, then
    /// the target networks.
    pub fn train_step(&mut self, batch: &Batch, rng: &mut dyn RngCore) -> Result<StepStats> {
        let next_actions = self.actor.sample(&batch.next_states, rng)?;
        let (flow_critic, main_critic) = self.critic_update(batch, &next_actions, rng)?;

        let bc_flow = self.bc.train_step(&batch.states, &batch.actions, rng)?;
        self.mark(Stage::BcFlow);

        let stats = {
            let value: Box<dyn ActionValue + '_> = match self.variant {
                Variant::Dfc | Variant::Dc => Box::new(MeanReturn {
                    critic: self.main_critic.as_ref().ok_or_else(|| missing("main critic"))?,
                    m: self.m,
                }),
                Variant::Fc => {
                    let fc = self.flow_critic.as_ref().ok_or_else(|| missing("flow critic"))?;
                    Box::new(FlowMeanReturn {
                        field: &fc.field,
                        n_steps: fc.n_steps,
                        m: self.m,
                    })
                }
                Variant::Fql => Box::new(ScalarQ(&self.scalar_critic.as_ref().ok_or_else(|| missing("scalar critic"))?.net)),
            };
            self.actor
                .train_step(&self.bc, value.as_ref(), &batch.states, self.alpha, self.normalize_q, rng)?
        };
        self.mark(Stage::Actor);

        self.target_update()?;
        let out = StepStats {
            flow_critic,
            main_critic,
            bc_flow,
            actor: stats.loss,
            distill: stats.distill,
            q_mean: stats.q_mean,
            actor_grad_norm: stats.grad_norm,
        };
        if !out.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss: {out:?}")));
        }
        Ok(out)
    }

    /// `[B, n]` return samples from the distributional critic, or `None` for
    /// the scalar variant. DFC and DC read the main critic, FC its flow field.
    pub fn return_samples(&self, states: &Tensor, actions: &Tensor, n: usize, rng: &mut (impl RngCore + ?Sized)) -> Result<Option<Tensor>> {
        let noise = gaussian(states.rows(), n, rng);
        match self.variant {
            Variant::Dfc | Variant::Dc => {
                let mc = self.main_critic.as_ref().ok_or_else(|| missing("main critic"))?;
                Ok(Some(mc.samples(states, actions, &noise)?))
            }
            Variant::Fc => {
                let fc = self.flow_critic.as_ref().ok_or_else(|| missing("flow critic"))?;
                Ok(Some(fc.sample_online(states, actions, &noise)?))
            }
            Variant::Fql => Ok(None),
        }
    }

    /// Deployed action for one state: fresh noise, no exploration.
    pub fn act(&self, state: &[f64], rng: &mut (impl RngCore + ?Sized)) -> Result<Vec<f64>> {
        Ok(self.actor.sample(&Tensor::row(state), rng)?.into_data())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("actor", &self.actor.net);
        ck.push("bc_flow", &self.bc.field.net);
        if let Some(fc) = &self.flow_critic {
            ck.push("flow_critic", &fc.field.net);
            ck.push("flow_critic_ema", &fc.ema_field.net);
        }
        if let Some(mc) = &self.main_critic {
            ck.push("main_critic", &mc.net);
        }
        if let Some(t) = &self.main_target {
            ck.push("main_critic_ema", t);
        }
        if let Some(sc) = &self.scalar_critic {
            ck.push("critic", &sc.net);
            ck.push("critic_ema", &sc.target);
        }
        ck
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{generate_dataset, EnvKind, ReplayBuffer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant) -> AgentConfig {
        AgentConfig {
            variant,
            m: 4,
            batch_size: 8,
            hidden: vec![8],
            ..AgentConfig::default()
        }
    }

    fn batch(env: EnvKind, n: usize) -> Batch {
        let ds = generate_dataset(env, &env.default_mix(), 200, 3);
        let buf = ReplayBuffer::with_offline(200, &ds.transitions);
        buf.sample(n, &mut ChaCha8Rng::seed_from_u64(4)).unwrap()
    }

    #[test]
    fn structure_per_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fql = make_variant(&small(Variant::Fql), 2, 2, &mut rng).unwrap();
        assert!(fql.scalar_critic.is_some() && fql.main_critic.is_none() && fql.flow_critic.is_none());
        assert!(fql.levels.is_none());
        let dc = make_variant(&small(Variant::Dc), 2, 2, &mut rng).unwrap();
        assert!(dc.flow_critic.is_none() && dc.main_critic.is_some() && dc.main_target.is_some());
        let fc = make_variant(&small(Variant::Fc), 2, 2, &mut rng).unwrap();
        assert!(fc.flow_critic.is_some() && fc.main_critic.is_none() && fc.levels.is_none());
        let dfc = make_variant(&small(Variant::Dfc), 2, 2, &mut rng).unwrap();
        assert!(dfc.flow_critic.is_some() && dfc.main_critic.is_some() && dfc.main_target.is_none());
    }

    #[test]
    fn update_order_matches_the_schedule() {
        use Stage::*;
        let expected = [
            (Variant::Dfc, vec![FlowCritic, MainCritic, BcFlow, Actor, Ema]),
            (Variant::Fc, vec![FlowCritic, BcFlow, Actor, Ema]),
            (Variant::Dc, vec![MainCritic, BcFlow, Actor, Ema]),
            (Variant::Fql, vec![MainCritic, BcFlow, Actor, Ema]),
        ];
        let b = batch(EnvKind::Maze, 8);
        for (variant, stages) in expected {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut agent = make_variant(&small(variant), 2, 2, &mut rng).unwrap();
            agent.trace = Some(Vec::new());
            for _ in 0..2 {
                let stats = agent.train_step(&b, &mut rng).unwrap();
                assert_eq!(stats.flow_critic.is_some(), agent.flow_critic.is_some());
            }
            let twice: Vec<Stage> = stages.iter().chain(&stages).copied().collect();
            assert_eq!(agent.trace.as_deref().unwrap(), twice.as_slice(), "{variant}");
        }
    }

    #[test]
    fn fc_actor_gradient_reaches_through_the_sampler() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let agent = make_variant(&small(Variant::Fc), 2, 2, &mut rng).unwrap();
        let fc = agent.flow_critic.as_ref().unwrap();
        let q = FlowMeanReturn {
            field: &fc.field,
            n_steps: 10,
            m: 3,
        };
        let mut g = Graph::new();
        let s = g.constant(Tensor::row(&[0.1, -0.2]));
        let a = g.param(Tensor::row(&[0.3, 0.4]));
        let v = q.q_on(&mut g, s, a, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let out = g.sum(v);
        g.backward(out).unwrap();
        let grad = g.grad(a).unwrap().to_vec();
        assert!(grad.iter().any(|v| v.abs() > 0.0));

        // central differences with the same noise
        let h = 1e-6;
        for k in 0..2 {
            let eval = |shift: f64| {
                let mut g = Graph::new();
                let s = g.constant(Tensor::row(&[0.1, -0.2]));
                let mut av = [0.3, 0.4];
                av[k] += shift;
                let a = g.constant(Tensor::row(&av));
                let v = q.q_on(&mut g, s, a, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
                g.value(v).data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn fql_targets_stop_at_terminals() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut agent = make_variant(&small(Variant::Fql), 3, 1, &mut rng).unwrap();
        let sc = agent.scalar_critic.as_mut().unwrap();
        // zero target network: every Bellman target is the reward itself
        sc.target = Mlp::zeros(sc.target.dims()).unwrap();
        let b = batch(EnvKind::Chain, 8);
        let before = sc.net.clone();
        let na = Tensor::zeros(vec![8, 1]);
        let (_, loss) = agent.critic_update(&b, &na, &mut rng).unwrap();
        let q = before.forward(&Tensor::concat_cols(&[&b.states, &b.actions]).unwrap()).unwrap();
        let expected = (0..8).map(|r| (q.data()[r] - b.rewards[r]).powi(2)).sum::<f64>() / 8.0;
        assert!((loss.unwrap() - expected).abs() < 1e-12);
    }
}
