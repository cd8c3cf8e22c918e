//! Reverse-mode automatic differentiation over batched 2-D tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! a record of how it was produced. Nodes are created in topological order, so
//! [`Graph::backward`] is a single reverse sweep. Gradients are only computed
//! along paths that reach a node created with [`Graph::param`].

use crate::error::{ensure, Error, Result};
use crate::nn::tensor::Tensor;
use crate::nn::{gelu, gelu_grad};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Gelu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Clip {
        a: Var,
        lo: f64,
        hi: f64,
    },
    ConcatCols(Vec<Var>),
    RepeatRows {
        a: Var,
        k: usize,
    },
    Reshape(Var),
    SortRows {
        a: Var,
        perm: Vec<usize>,
    },
    SumCols(Var),
    MeanCols(Var),
    Sum(Var),
    Mean(Var),
    QuantileHuber {
        z: Var,
        targets: Tensor,
        levels: Vec<f64>,
        kappa: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    ensure!(a.shape() == b.shape(), Shape, "{what}: shape {:?} vs {:?}", a.shape(), b.shape());
    Ok(())
}

/// `c[m, n] (+)= a[m, k] * b[k, n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // SAFETY: callers pass slices whose lengths cover the strided extents
    // (checked by the shape validation in each op).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y = x * w^T (+ b)` for `x: [rows, in]`, `w: [out, in]`.
pub(crate) fn linear_forward(x: &[f64], rows: usize, w: &[f64], out: usize, b: Option<&[f64]>) -> Vec<f64> {
    let inp = x.len().checked_div(rows).unwrap_or(0);
    let mut y = vec![0.0; rows * out];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * out..(r + 1) * out].copy_from_slice(b);
        }
    }
    gemm(rows, inp, out, x, inp, 1, w, 1, inp, if b.is_some() { 1.0 } else { 0.0 }, &mut y);
    y
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        ensure!(wv.shape().len() == 2, Shape, "weight must be 2-D, got {:?}", wv.shape());
        let (out, inp) = (wv.shape()[0], wv.shape()[1]);
        ensure!(
            xv.cols() == inp,
            Shape,
            "linear input has {} features, layer expects {}",
            xv.cols(),
            inp
        );
        if let Some(b) = b {
            ensure!(self.value(b).len() == out, Shape, "bias length {} != {}", self.value(b).len(), out);
        }
        let rows = xv.rows();
        let y = linear_forward(xv.data(), rows, wv.data(), out, b.map(|b| self.value(b).data()));
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::matrix(rows, out, y)?, Op::Linear { x, w, b }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(v, Op::Square(a), rg)
    }

    /// Elementwise clamp; the gradient is zero wherever the value was clamped.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).clip(lo, hi);
        let rg = self.rg(a);
        self.push(v, Op::Clip { a, lo, hi }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_cols(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let t = self.value(a).repeat_rows(k);
        let rg = self.rg(a);
        self.push(t, Op::RepeatRows { a, k }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Sort each row ascending. The permutation is recorded so gradients
    /// scatter back to the original positions.
    pub fn sort_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut perm = Vec::with_capacity(av.len());
        let mut data = Vec::with_capacity(av.len());
        for r in 0..rows {
            let row = av.row_slice(r);
            let mut idx: Vec<usize> = (0..cols).collect();
            idx.sort_by(|&i, &j| row[i].total_cmp(&row[j]));
            data.extend(idx.iter().map(|&i| row[i]));
            perm.extend(idx.into_iter().map(|i| r * cols + i));
        }
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::SortRows { a, perm }, rg)
    }

    /// Per-row sum: `[B, n] -> [B, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data: Vec<f64> = (0..av.rows()).map(|r| av.row_slice(r).iter().sum()).collect();
        let t = Tensor::column(&data);
        let rg = self.rg(a);
        self.push(t, Op::SumCols(a), rg)
    }

    /// Per-row mean: `[B, n] -> [B, 1]`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.cols() as f64;
        let data: Vec<f64> = (0..av.rows()).map(|r| av.row_slice(r).iter().sum::<f64>() / n).collect();
        let t = Tensor::column(&data);
        let rg = self.rg(a);
        self.push(t, Op::MeanCols(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Pairwise quantile Huber loss between predicted samples `z: [B, Mz]`
    /// (column `i` at level `levels[i]`) and constant targets `[B, Mt]`:
    /// `mean_b (1 / (Mz Mt)) sum_i sum_j rho(targets[b, j] - z[b, i]; levels[i], kappa)`.
    pub fn quantile_huber(&mut self, z: Var, targets: &Tensor, levels: &[f64], kappa: f64) -> Result<Var> {
        let zv = self.value(z);
        ensure!(zv.cols() == levels.len(), Shape, "{} samples vs {} levels", zv.cols(), levels.len());
        ensure!(
            zv.rows() == targets.rows(),
            Shape,
            "{} rows vs {} target rows",
            zv.rows(),
            targets.rows()
        );
        ensure!(kappa > 0.0, Contract, "kappa must be positive, got {kappa}");
        let (b, mz, mt) = (zv.rows(), zv.cols(), targets.cols());
        let mut total = 0.0;
        for r in 0..b {
            let zr = zv.row_slice(r);
            let tr = targets.row_slice(r);
            for (i, &zi) in zr.iter().enumerate() {
                for &tj in tr {
                    total += crate::critic::quantile_huber(tj - zi, levels[i], kappa);
                }
            }
        }
        let loss = total / (b as f64 * mz as f64 * mt as f64);
        let rg = self.rg(z);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::QuantileHuber {
                z,
                targets: targets.clone(),
                levels: levels.to_vec(),
                kappa,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients of earlier calls are
    /// discarded first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        ensure!(lv.len() == 1, Contract, "backward needs a scalar loss, got shape {:?}", lv.shape());
        ensure!(lv.data()[0].is_finite(), Numeric, "loss is not finite: {}", lv.data()[0]);
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].value.grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].value.grad = Some(g);
        }

        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) {
                if let Some(g) = &n.value.grad {
                    if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                        return Err(Error::Numeric(format!("non-finite gradient at node {i}, index {bad}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&Tensor, &mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let node = &mut self.nodes[v.0];
        let mut g = node.value.grad.take().unwrap_or_else(|| vec![0.0; node.value.len()]);
        f(&node.value, &mut g);
        node.value.grad = Some(g);
    }

    fn propagate(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, out) = (self.nodes[idx].value.rows(), self.nodes[idx].value.cols());
                let inp = self.value(w).shape()[1];
                if self.rg(x) {
                    let wdata = self.value(w).data().to_vec();
                    // dx[rows, in] += g[rows, out] * w[out, in]
                    self.accumulate(x, |_, dx| gemm(rows, out, inp, g, out, 1, &wdata, inp, 1, 1.0, dx));
                }
                if self.rg(w) {
                    let xdata = self.value(x).data().to_vec();
                    // dw[out, in] += g^T[out, rows] * x[rows, in]
                    self.accumulate(w, |_, dw| gemm(out, rows, inp, g, 1, out, &xdata, inp, 1, 1.0, dw));
                }
                if let Some(b) = b {
                    self.accumulate(b, |_, db| {
                        for r in 0..rows {
                            for (d, &gv) in db.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Gelu(a) => self.accumulate(a, |v, da| {
                for ((d, &x), &gv) in da.iter_mut().zip(v.data()).zip(g) {
                    *d += gv * gelu_grad(x);
                }
            }),
            Op::Add(a, b) => {
                self.accumulate(a, |_, d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
                self.accumulate(b, |_, d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |_, d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv));
                self.accumulate(b, |_, d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let bv = self.value(b).data().to_vec();
                let av = self.value(a).data().to_vec();
                self.accumulate(a, |_, d| {
                    for ((d, &gv), &y) in d.iter_mut().zip(g).zip(&bv) {
                        *d += gv * y;
                    }
                });
                self.accumulate(b, |_, d| {
                    for ((d, &gv), &x) in d.iter_mut().zip(g).zip(&av) {
                        *d += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(a, |_, d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += c * gv)),
            Op::Square(a) => self.accumulate(a, |v, d| {
                for ((d, &gv), &x) in d.iter_mut().zip(g).zip(v.data()) {
                    *d += 2.0 * x * gv;
                }
            }),
            Op::Clip { a, lo, hi } => self.accumulate(a, |v, d| {
                for ((d, &gv), &x) in d.iter_mut().zip(g).zip(v.data()) {
                    if x > lo && x < hi {
                        *d += gv;
                    }
                }
            }),
            Op::ConcatCols(ref parts) => {
                let total = self.nodes[idx].value.cols();
                let rows = self.nodes[idx].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate(p, |_, d| {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + c];
                            for (d, &gv) in d[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *d += gv;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::RepeatRows { a, k } => self.accumulate(a, |v, d| {
                let c = v.cols();
                for r in 0..v.rows() {
                    for rep in 0..k {
                        let src = &g[(r * k + rep) * c..(r * k + rep + 1) * c];
                        for (d, &gv) in d[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
            }),
            Op::Reshape(a) => self.accumulate(a, |_, d| d.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv)),
            Op::SortRows { a, ref perm } => self.accumulate(a, |_, d| {
                for (&src, &gv) in perm.iter().zip(g) {
                    d[src] += gv;
                }
            }),
            Op::SumCols(a) => self.accumulate(a, |v, d| {
                let c = v.cols();
                for (r, &gv) in g.iter().enumerate() {
                    d[r * c..(r + 1) * c].iter_mut().for_each(|d| *d += gv);
                }
            }),
            Op::MeanCols(a) => self.accumulate(a, |v, d| {
                let c = v.cols();
                for (r, &gv) in g.iter().enumerate() {
                    d[r * c..(r + 1) * c].iter_mut().for_each(|d| *d += gv / c as f64);
                }
            }),
            Op::Sum(a) => self.accumulate(a, |_, d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => self.accumulate(a, |v, d| {
                let n = v.len() as f64;
                d.iter_mut().for_each(|d| *d += g[0] / n);
            }),
            Op::QuantileHuber {
                z,
                ref targets,
                ref levels,
                kappa,
            } => self.accumulate(z, |v, d| {
                let (b, mz, mt) = (v.rows(), v.cols(), targets.cols());
                let norm = g[0] / (b as f64 * mz as f64 * mt as f64);
                for r in 0..b {
                    let zr = v.row_slice(r);
                    let tr = targets.row_slice(r);
                    for (i, &zi) in zr.iter().enumerate() {
                        let mut acc = 0.0;
                        for &tj in tr {
                            // d/dz rho(t - z) = -rho'(u)
                            acc -= crate::critic::quantile_huber_grad(tj - zi, levels[i], kappa);
                        }
                        d[r * mz + i] += norm * acc;
                    }
                }
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_params_has_unit_gradient() {
        let mut g = Graph::new();
        let p = g.param(Tensor::from_rows(&[vec![0.3, -1.2], vec![4.0, 0.5]]).unwrap());
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn squared_norm_of_linear_map() {
        // loss = ||W x||^2, dL/dW = 2 (W x) x^T
        let w = [[0.5, -1.0], [2.0, 0.25]];
        let x = [1.5, -2.0];
        let mut g = Graph::new();
        let wv = g.param(Tensor::from_rows(&[w[0].to_vec(), w[1].to_vec()]).unwrap());
        let xv = g.constant(Tensor::row(&x));
        let y = g.linear(xv, wv, None).unwrap();
        let sq = g.square(y);
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        let wx = [w[0][0] * x[0] + w[0][1] * x[1], w[1][0] * x[0] + w[1][1] * x[1]];
        let expected = [2.0 * wx[0] * x[0], 2.0 * wx[0] * x[1], 2.0 * wx[1] * x[0], 2.0 * wx[1] * x[1]];
        for (a, b) in g.grad(wv).unwrap().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn sort_scatters_gradient_back() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(&[3.0, 1.0, 2.0]));
        let s = g.sort_rows(p);
        assert_eq!(g.value(s).data(), &[1.0, 2.0, 3.0]);
        let w = g.constant(Tensor::row(&[10.0, 20.0, 30.0]));
        let m = g.mul(s, w).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[30.0, 10.0, 20.0]);
    }

    #[test]
    fn clip_blocks_gradient_outside_box() {
        let mut g = Graph::new();
        let p = g.param(Tensor::row(&[-2.0, 0.5, 3.0]));
        let c = g.clip(p, -1.0, 1.0);
        let l = g.sum(c);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(&[1.0]));
        let p = g.param(Tensor::row(&[2.0]));
        let m = g.mul(c, p).unwrap();
        let l = g.sum(m);
        g.backward(l).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(p).unwrap(), &[1.0]);
    }
}
