//! Conditional flow matching over straight-line paths, and fixed-step Euler
//! sampling of the learned ODE.
//!
//! The same machinery drives the behavior-cloning policy (points are actions,
//! conditioned on the state) and the return-distribution critic (points are
//! scalar returns, conditioned on state and action).

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::{BoundMlp, Graph, Mlp, Tensor, Var};

/// A time-dependent conditional velocity field `v(t, cond, x)`.
pub trait VelocityField {
    fn point_dim(&self) -> usize;

    /// `t: [rows, 1]`, `cond: [rows, c]`, `x: [rows, point_dim]`.
    fn velocity(&self, t: &Tensor, cond: &Tensor, x: &Tensor) -> Result<Tensor>;
}

/// Velocity field backed by an MLP over the concatenation `[t, cond, x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldNet {
    pub net: Mlp,
    cond_dim: usize,
    point_dim: usize,
}

impl VectorFieldNet {
    pub fn new(cond_dim: usize, point_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut dims = vec![1 + cond_dim + point_dim];
        dims.extend_from_slice(hidden);
        dims.push(point_dim);
        Ok(Self {
            net: Mlp::new(&dims, rng)?,
            cond_dim,
            point_dim,
        })
    }

    pub fn from_mlp(net: Mlp, cond_dim: usize, point_dim: usize) -> Result<Self> {
        ensure!(
            net.input_dim() == 1 + cond_dim + point_dim && net.output_dim() == point_dim,
            Shape,
            "network dims {:?} do not fit cond {cond_dim} / point {point_dim}",
            net.dims()
        );
        Ok(Self { net, cond_dim, point_dim })
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn check(&self, t: &Tensor, cond: &Tensor, x: &Tensor) -> Result<()> {
        ensure!(t.cols() == 1, Shape, "time must be a column, got {:?}", t.shape());
        ensure!(
            cond.cols() == self.cond_dim,
            Shape,
            "condition has {} dims, expected {}",
            cond.cols(),
            self.cond_dim
        );
        ensure!(
            x.cols() == self.point_dim,
            Shape,
            "point has {} dims, expected {}",
            x.cols(),
            self.point_dim
        );
        Ok(())
    }

    /// Differentiable velocity on a tape. `t` enters as a constant.
    pub fn velocity_on(&self, graph: &mut Graph, bound: &BoundMlp, t: &Tensor, cond: Var, x: Var) -> Result<Var> {
        self.check(t, graph.value(cond), graph.value(x))?;
        let tv = graph.constant(t.clip(0.0, 1.0));
        let input = graph.concat_cols(&[tv, cond, x])?;
        bound.forward(graph, input)
    }
}

impl VelocityField for VectorFieldNet {
    fn point_dim(&self) -> usize {
        self.point_dim
    }

    fn velocity(&self, t: &Tensor, cond: &Tensor, x: &Tensor) -> Result<Tensor> {
        self.check(t, cond, x)?;
        let input = Tensor::concat_cols(&[&t.clip(0.0, 1.0), cond, x])?;
        self.net.forward(&input)
    }
}

/// Adapter turning a closure into a [`VelocityField`].
pub struct FnField<F> {
    pub point_dim: usize,
    pub f: F,
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&Tensor, &Tensor, &Tensor) -> Tensor,
{
    fn point_dim(&self) -> usize {
        self.point_dim
    }

    fn velocity(&self, t: &Tensor, cond: &Tensor, x: &Tensor) -> Result<Tensor> {
        Ok((self.f)(t, cond, x))
    }
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Result<Vec<f64>> {
    ensure!(
        x0.len() == x1.len(),
        Shape,
        "endpoints differ in length: {} vs {}",
        x0.len(),
        x1.len()
    );
    ensure!((0.0..=1.0).contains(&t), Contract, "interpolation time {t} outside [0, 1]");
    Ok(x0.iter().zip(x1).map(|(&a, &b)| (1.0 - t) * a + t * b).collect())
}

/// Single-sample flow-matching loss `||v(t, cond, x_t) - (x1 - x0)||^2`.
pub fn fm_loss(field: &impl VelocityField, cond: &[f64], x0: &[f64], x1: &[f64], t: f64) -> Result<f64> {
    let xt = interpolate(x0, x1, t)?;
    let v = field.velocity(&Tensor::scalar(t), &Tensor::row(cond), &Tensor::row(&xt))?;
    ensure!(
        v.len() == x0.len(),
        Shape,
        "field returned {} dims for a {}-dim point",
        v.len(),
        x0.len()
    );
    Ok(v.data()
        .iter()
        .zip(x1.iter().zip(x0))
        .map(|(&v, (&b, &a))| (v - (b - a)).powi(2))
        .sum())
}

/// Batched flow-matching loss on a tape: mean over rows of
/// `||v(t_r, cond_r, (1 - t_r) x0_r + t_r x1_r) - (x1_r - x0_r)||^2`.
pub fn fm_loss_on(
    graph: &mut Graph,
    field: &VectorFieldNet,
    bound: &BoundMlp,
    t: &Tensor,
    cond: Var,
    x0: &Tensor,
    x1: &Tensor,
) -> Result<Var> {
    ensure!(x0.shape() == x1.shape(), Shape, "x0 {:?} vs x1 {:?}", x0.shape(), x1.shape());
    ensure!(
        t.rows() == x0.rows() && t.cols() == 1,
        Shape,
        "time {:?} for {} rows",
        t.shape(),
        x0.rows()
    );
    ensure!(
        t.data().iter().all(|v| (0.0..=1.0).contains(v)),
        Contract,
        "flow time outside [0, 1]"
    );
    let d = x0.cols();
    let mut xt = Vec::with_capacity(x0.len());
    let mut vel = Vec::with_capacity(x0.len());
    for r in 0..x0.rows() {
        let tr = t.data()[r];
        for c in 0..d {
            let (a, b) = (x0.get(r, c), x1.get(r, c));
            xt.push((1.0 - tr) * a + tr * b);
            vel.push(b - a);
        }
    }
    let xt = graph.constant(Tensor::matrix(x0.rows(), d, xt)?);
    let target = graph.constant(Tensor::matrix(x0.rows(), d, vel)?);
    let v = field.velocity_on(graph, bound, t, cond, xt)?;
    let diff = graph.sub(v, target)?;
    let sq = graph.square(diff);
    let per_row = graph.sum_cols(sq);
    Ok(graph.mean(per_row))
}

/// Forward Euler from `t = 0` to `t = 1` in `n_steps` uniform steps.
pub fn euler_sample(field: &impl VelocityField, cond: &Tensor, x0: &Tensor, n_steps: usize) -> Result<Tensor> {
    ensure!(n_steps >= 1, Contract, "euler_sample needs at least one step");
    ensure!(
        cond.rows() == x0.rows(),
        Shape,
        "{} condition rows vs {} points",
        cond.rows(),
        x0.rows()
    );
    let h = 1.0 / n_steps as f64;
    let mut x = x0.clone();
    for k in 0..n_steps {
        let t = Tensor::full(vec![x.rows(), 1], k as f64 * h);
        let v = field.velocity(&t, cond, &x)?;
        ensure!(v.shape() == x.shape(), Shape, "velocity {:?} for point {:?}", v.shape(), x.shape());
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += h * vi;
        }
    }
    Ok(x)
}

/// Euler integration recorded on a tape so gradients reach `cond` (and `x0`)
/// through every step.
pub fn euler_sample_on(graph: &mut Graph, field: &VectorFieldNet, bound: &BoundMlp, cond: Var, x0: Var, n_steps: usize) -> Result<Var> {
    ensure!(n_steps >= 1, Contract, "euler_sample needs at least one step");
    let rows = graph.value(x0).rows();
    let h = 1.0 / n_steps as f64;
    let mut x = x0;
    for k in 0..n_steps {
        let t = Tensor::full(vec![rows, 1], k as f64 * h);
        let v = field.velocity_on(graph, bound, &t, cond, x)?;
        let step = graph.scale(v, h);
        x = graph.add(x, step)?;
    }
    Ok(x)
}
