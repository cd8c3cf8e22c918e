//! Dual-policy actor: a behavior-cloned flow policy and a one-step policy
//! that maximizes the critic while staying close to it.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::critic::ActionValue;
use crate::error::{ensure, Result};
use crate::flow::{euler_sample, fm_loss_on, VectorFieldNet};
use crate::nn::{grad_norm, AdamState, BoundMlp, Graph, Mlp, Tensor, Var};

pub(crate) fn gaussian(rows: usize, cols: usize, rng: &mut (impl RngCore + ?Sized)) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("sized")
}

/// Flow policy trained purely by behavior cloning.
#[derive(Debug, Clone)]
pub struct BcFlowPolicy {
    pub field: VectorFieldNet,
    pub n_steps: usize,
    pub opt: AdamState,
}

impl BcFlowPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], lr: f64, n_steps: usize, rng: &mut impl Rng) -> Result<Self> {
        let field = VectorFieldNet::new(state_dim, action_dim, hidden, rng)?;
        let opt = AdamState::new(field.net.param_count(), lr);
        Ok(Self { field, n_steps, opt })
    }

    pub fn action_dim(&self) -> usize {
        use crate::flow::VelocityField;
        self.field.point_dim()
    }

    /// Integrate the action field from `eps` and clip to the box.
    pub fn sample(&self, states: &Tensor, eps: &Tensor) -> Result<Tensor> {
        Ok(euler_sample(&self.field, states, eps, self.n_steps)?.clip(-1.0, 1.0))
    }

    /// One Adam step on [`bc_flow_loss`] with fresh `x0 ~ N(0, I)` and `t ~ U(0, 1)`.
    pub fn train_step(&mut self, states: &Tensor, actions: &Tensor, rng: &mut (impl RngCore + ?Sized)) -> Result<f64> {
        let b = states.rows();
        let x0 = gaussian(b, actions.cols(), rng);
        let t = Tensor::column(&(0..b).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>());
        let mut g = Graph::new();
        let bound = self.field.net.bind(&mut g, true);
        let loss = bc_flow_loss(&mut g, &self.field, &bound, states, actions, &x0, &t)?;
        let value = g.scalar_value(loss);
        g.backward(loss)?;
        self.opt.step(self.field.net.params_mut(), &bound.grads(&g))?;
        Ok(value)
    }
}

/// Flow matching from Gaussian noise `x0` to dataset actions.
pub fn bc_flow_loss(
    graph: &mut Graph,
    field: &VectorFieldNet,
    bound: &BoundMlp,
    states: &Tensor,
    actions: &Tensor,
    x0: &Tensor,
    t: &Tensor,
) -> Result<Var> {
    let s = graph.constant(states.clone());
    fm_loss_on(graph, field, bound, t, s, x0, actions)
}

/// Single feed-forward map `(s, eps) -> a`.
#[derive(Debug, Clone)]
pub struct OneStepPolicy {
    pub net: Mlp,
    pub opt: AdamState,
    action_dim: usize,
}

/// Scalars from one actor update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub q_mean: f64,
    pub distill: f64,
    pub grad_norm: f64,
}

impl OneStepPolicy {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], lr: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(action_dim);
        let net = Mlp::new(&dims, rng)?;
        Ok(Self::from_mlp(net, lr))
    }

    pub fn from_mlp(net: Mlp, lr: f64) -> Self {
        let action_dim = net.output_dim();
        let opt = AdamState::new(net.param_count(), lr);
        Self { net, opt, action_dim }
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    /// Unclipped network output.
    pub fn raw(&self, states: &Tensor, eps: &Tensor) -> Result<Tensor> {
        self.net.forward(&Tensor::concat_cols(&[states, eps])?)
    }

    /// Deployed action `clip(pi(s, eps))`.
    pub fn act(&self, states: &Tensor, eps: &Tensor) -> Result<Tensor> {
        Ok(self.raw(states, eps)?.clip(-1.0, 1.0))
    }

    /// Actions with fresh noise for every row.
    pub fn sample(&self, states: &Tensor, rng: &mut (impl RngCore + ?Sized)) -> Result<Tensor> {
        let eps = gaussian(states.rows(), self.action_dim, rng);
        self.act(states, &eps)
    }

    pub fn raw_on(&self, graph: &mut Graph, bound: &BoundMlp, states: Var, eps: &Tensor) -> Result<Var> {
        let e = graph.constant(eps.clone());
        let input = graph.concat_cols(&[states, e])?;
        bound.forward(graph, input)
    }

    /// One Adam step on [`actor_loss`] with a fresh `eps` per row.
    pub fn train_step(
        &mut self,
        bc: &BcFlowPolicy,
        critic: &dyn ActionValue,
        states: &Tensor,
        alpha: f64,
        normalize_q: bool,
        rng: &mut dyn RngCore,
    ) -> Result<ActorStats> {
        let eps = gaussian(states.rows(), self.action_dim, rng);
        let mut g = Graph::new();
        let bound = self.net.bind(&mut g, true);
        let parts = actor_loss(&mut g, self, &bound, bc, critic, states, &eps, alpha, normalize_q, rng)?;
        let loss = g.scalar_value(parts.total);
        g.backward(parts.total)?;
        let grads = bound.grads(&g);
        let stats = ActorStats {
            loss,
            q_mean: g.value(parts.q).mean(),
            distill: g.scalar_value(parts.distill),
            grad_norm: grad_norm(&grads),
        };
        self.opt.step(self.net.params_mut(), &grads)?;
        Ok(stats)
    }
}

/// Tape handles for the pieces of the actor objective.
#[derive(Debug, Clone, Copy)]
pub struct ActorLoss {
    pub total: Var,
    /// `[B, 1]` critic values at the policy's actions.
    pub q: Var,
    /// Mean squared distance to the BC flow policy.
    pub distill: Var,
}

/// Mean over rows of `||pi(s, eps) - mu(s, eps)||^2`, no tape.
pub fn distill_reg(onestep: &OneStepPolicy, bc: &BcFlowPolicy, states: &Tensor, eps: &Tensor) -> Result<f64> {
    let a = onestep.raw(states, eps)?;
    let b = bc.sample(states, eps)?;
    ensure!(a.shape() == b.shape(), Shape, "policy outputs {:?} vs {:?}", a.shape(), b.shape());
    let rows = a.rows().max(1) as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / rows)
}

/// `-mean(Q(s, clip(pi(s, eps)))) + alpha * mean ||pi(s, eps) - mu(s, eps)||^2`.
///
/// The BC flow target is computed off-tape, so only the one-step policy
/// receives gradients. With `normalize_q` the Q term is divided by the
/// (constant) mean absolute Q of the batch.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss(
    graph: &mut Graph,
    onestep: &OneStepPolicy,
    bound: &BoundMlp,
    bc: &BcFlowPolicy,
    critic: &dyn ActionValue,
    states: &Tensor,
    eps: &Tensor,
    alpha: f64,
    normalize_q: bool,
    rng: &mut dyn RngCore,
) -> Result<ActorLoss> {
    ensure!(alpha >= 0.0, Contract, "alpha must be non-negative, got {alpha}");
    let bc_actions = graph.constant(bc.sample(states, eps)?);
    let s = graph.constant(states.clone());
    let raw = onestep.raw_on(graph, bound, s, eps)?;
    let diff = graph.sub(raw, bc_actions)?;
    let sq = graph.square(diff);
    let per_row = graph.sum_cols(sq);
    let distill = graph.mean(per_row);

    let actions = graph.clip(raw, -1.0, 1.0);
    let q = critic.q_on(graph, s, actions, rng)?;
    let q_mean = graph.mean(q);
    let lam = if normalize_q {
        1.0 / graph.value(q).data().iter().map(|v| v.abs()).sum::<f64>().max(1e-6) * graph.value(q).len() as f64
    } else {
        1.0
    };
    let q_term = graph.scale(q_mean, -lam);
    let reg = graph.scale(distill, alpha);
    let total = graph.add(q_term, reg)?;
    Ok(ActorLoss { total, q, distill })
}

/// Exploratory action `clip(pi(s, eps) + delta * eta)` for online collection.
pub fn explore_action(onestep: &OneStepPolicy, state: &[f64], delta: f64, rng: &mut (impl RngCore + ?Sized)) -> Result<Vec<f64>> {
    ensure!(delta >= 0.0, Contract, "exploration scale must be non-negative, got {delta}");
    let eps = gaussian(1, onestep.action_dim, rng);
    let raw = onestep.raw(&Tensor::row(state), &eps)?;
    Ok(raw
        .data()
        .iter()
        .map(|&a| {
            let noise = if delta > 0.0 {
                delta * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            (a + noise).clamp(-1.0, 1.0)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_bc(state_dim: usize, action_dim: usize) -> BcFlowPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bc = BcFlowPolicy::new(state_dim, action_dim, &[8], 1e-3, 10, &mut rng).unwrap();
        bc.field.net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        bc
    }

    #[test]
    fn zero_field_returns_clipped_noise() {
        let bc = zero_bc(2, 2);
        let eps = Tensor::row(&[0.3, -1.7]);
        let a = bc.sample(&Tensor::row(&[0.0, 0.0]), &eps).unwrap();
        assert_eq!(a.data(), &[0.3, -1.0]);
    }

    #[test]
    fn constant_field_from_zero_noise() {
        let mut bc = zero_bc(1, 2);
        // bias of the output layer is the last `action_dim` parameters
        let n = bc.field.net.param_count();
        bc.field.net.params_mut()[n - 2] = 0.4;
        bc.field.net.params_mut()[n - 1] = 3.0;
        let a = bc.sample(&Tensor::row(&[0.5]), &Tensor::row(&[0.0, 0.0])).unwrap();
        assert!((a.data()[0] - 0.4).abs() < 1e-12);
        assert_eq!(a.data()[1], 1.0);
    }

    #[test]
    fn bc_sampling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bc = BcFlowPolicy::new(2, 2, &[16, 16], 1e-3, 10, &mut rng).unwrap();
        let s = Tensor::row(&[0.1, -0.2]);
        let e = Tensor::row(&[0.5, 0.5]);
        assert_eq!(bc.sample(&s, &e).unwrap(), bc.sample(&s, &e).unwrap());
    }

    fn policy_with_output(values: &[f64], state_dim: usize) -> OneStepPolicy {
        let d = values.len();
        let mut net = Mlp::zeros(&[state_dim + d, d]).unwrap();
        let n = net.param_count();
        net.params_mut()[n - d..].copy_from_slice(values);
        OneStepPolicy::from_mlp(net, 1e-3)
    }

    #[test]
    fn distill_reg_values() {
        let bc = zero_bc(1, 2);
        let s = Tensor::row(&[0.0]);
        let eps = Tensor::row(&[0.0, 0.0]);
        assert_eq!(distill_reg(&policy_with_output(&[0.0, 0.0], 1), &bc, &s, &eps).unwrap(), 0.0);
        assert_eq!(distill_reg(&policy_with_output(&[1.0, 0.0], 1), &bc, &s, &eps).unwrap(), 1.0);
        assert_eq!(distill_reg(&policy_with_output(&[3.0, 4.0], 1), &bc, &s, &eps).unwrap(), 25.0);
    }

    struct NegSquaredNorm {
        target: Vec<f64>,
    }

    impl ActionValue for NegSquaredNorm {
        fn q_on(&self, g: &mut Graph, states: Var, actions: Var, _rng: &mut dyn RngCore) -> Result<Var> {
            let rows = g.value(states).rows();
            let t = g.constant(Tensor::row(&self.target).repeat_rows(rows));
            let d = g.sub(actions, t)?;
            let sq = g.square(d);
            let s = g.sum_cols(sq);
            Ok(g.scale(s, -1.0))
        }
    }

    struct IgnoresAction;

    impl ActionValue for IgnoresAction {
        fn q_on(&self, g: &mut Graph, states: Var, _actions: Var, _rng: &mut dyn RngCore) -> Result<Var> {
            let rows = g.value(states).rows();
            Ok(g.constant(Tensor::full(vec![rows, 1], 5.0)))
        }
    }

    #[test]
    fn quadratic_critic_pulls_actions_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bc = zero_bc(2, 2);
        let mut pi = OneStepPolicy::new(2, 2, &[16], 1e-2, &mut rng).unwrap();
        let critic = NegSquaredNorm { target: vec![0.0, 0.0] };
        let states = gaussian(32, 2, &mut rng);
        let probe = gaussian(256, 2, &mut ChaCha8Rng::seed_from_u64(99));
        let probe_eps = gaussian(256, 2, &mut ChaCha8Rng::seed_from_u64(98));
        let norm = |pi: &OneStepPolicy| pi.act(&probe, &probe_eps).unwrap().data().iter().map(|v| v * v).sum::<f64>();
        let before = norm(&pi);
        let mut prev = before;
        for step in 0..100 {
            pi.train_step(&bc, &critic, &states, 0.0, false, &mut rng).unwrap();
            if step % 20 == 19 {
                let now = norm(&pi);
                assert!(now < prev, "norm went {prev} -> {now}");
                prev = now;
            }
        }
        assert!(prev < before * 0.5);
    }

    #[test]
    fn argmax_converges_to_known_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bc = zero_bc(1, 1);
        let mut pi = OneStepPolicy::new(1, 1, &[16], 3e-3, &mut rng).unwrap();
        let critic = NegSquaredNorm { target: vec![0.6] };
        for _ in 0..2000 {
            let s = gaussian(32, 1, &mut rng);
            pi.train_step(&bc, &critic, &s, 0.0, false, &mut rng).unwrap();
        }
        let s = gaussian(200, 1, &mut rng);
        let a = pi.sample(&s, &mut rng).unwrap();
        assert!(a.data().iter().all(|v| (v - 0.6).abs() < 0.05), "{:?}", &a.data()[..5]);
    }

    #[test]
    fn q_term_gradient_vanishes_when_critic_ignores_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bc = zero_bc(2, 2);
        let pi = OneStepPolicy::new(2, 2, &[8], 1e-3, &mut rng).unwrap();
        let states = gaussian(4, 2, &mut rng);
        let eps = gaussian(4, 2, &mut rng);
        let mut g = Graph::new();
        let bound = pi.net.bind(&mut g, true);
        let parts = actor_loss(&mut g, &pi, &bound, &bc, &IgnoresAction, &states, &eps, 0.0, false, &mut rng).unwrap();
        g.backward(parts.total).unwrap();
        assert!(bound.grads(&g).iter().all(|&v| v == 0.0));

        // with alpha > 0 the loss is -Q + alpha * distill exactly
        let mut g = Graph::new();
        let bound = pi.net.bind(&mut g, true);
        let parts = actor_loss(&mut g, &pi, &bound, &bc, &IgnoresAction, &states, &eps, 2.5, false, &mut rng).unwrap();
        let reg = distill_reg(&pi, &bc, &states, &eps).unwrap() / 1.0;
        assert!((g.scalar_value(parts.total) - (-5.0 + 2.5 * reg)).abs() < 1e-12);
    }

    #[test]
    fn large_alpha_matches_bc_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bc = BcFlowPolicy::new(2, 2, &[16], 1e-3, 10, &mut rng).unwrap();
        let mut pi = OneStepPolicy::new(2, 2, &[32, 32], 1e-3, &mut rng).unwrap();
        let critic = NegSquaredNorm { target: vec![1.0, 1.0] };
        for _ in 0..12_000 {
            let s = gaussian(64, 2, &mut rng).clip(-1.0, 1.0);
            pi.train_step(&bc, &critic, &s, 1e4, false, &mut rng).unwrap();
        }
        let s = gaussian(256, 2, &mut rng).clip(-1.0, 1.0);
        let eps = gaussian(256, 2, &mut rng);
        let reg = distill_reg(&pi, &bc, &s, &eps).unwrap();
        // the critic pulls towards (1, 1); a dominant alpha keeps the policy on the BC map
        assert!(reg < 1e-3, "distill {reg}");
    }

    #[test]
    fn exploration_noise() {
        let pi = policy_with_output(&[0.0, 0.0], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = [0.1, 0.2];
        let mut r0 = ChaCha8Rng::seed_from_u64(7);
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let a = explore_action(&pi, &s, 0.0, &mut r0).unwrap();
        let eps = gaussian(1, 2, &mut r1);
        assert_eq!(a, pi.act(&Tensor::row(&s), &eps).unwrap().into_data());

        let samples: Vec<f64> = (0..10_000).flat_map(|_| explore_action(&pi, &s, 0.3, &mut rng).unwrap()).collect();
        assert!(samples.iter().all(|v| (-1.0..=1.0).contains(v)));
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples.len() as f64).sqrt();
        assert!((std - 0.3).abs() < 0.03, "std {std}");
    }
}
