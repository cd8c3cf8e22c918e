use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::graph::{linear_forward, Graph, Var};
use crate::nn::{gelu, Tensor};

/// Dense feed-forward network: GELU on every hidden layer, identity output.
///
/// All parameters live in one flat buffer so optimizers, EMA tracking and
/// checkpoints treat the network as a plain vector. Layer `k` occupies
/// `W_k` (row-major `out x in`) followed by `b_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    params: Vec<f64>,
}

impl Mlp {
    /// `dims = [input, hidden..., output]`, Glorot-uniform weights, zero biases.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let limit = (6.0 / (inp + out) as f64).sqrt();
            for p in &mut mlp.params[offset..offset + inp * out] {
                *p = rng.gen_range(-limit..=limit);
            }
            offset += inp * out + out;
        }
        Ok(mlp)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        ensure!(dims.len() >= 2, Shape, "an MLP needs at least input and output dims, got {dims:?}");
        ensure!(dims.iter().all(|&d| d > 0), Shape, "zero-width layer in {dims:?}");
        let n = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; n],
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut mlp = Self::zeros(dims)?;
        ensure!(
            params.len() == mlp.params.len(),
            Shape,
            "dims {dims:?} need {} parameters, got {}",
            mlp.params.len(),
            params.len()
        );
        mlp.params = params;
        Ok(mlp)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, bias, in, out)` for each layer.
    pub fn layers(&self) -> impl Iterator<Item = (&[f64], &[f64], usize, usize)> + '_ {
        let mut offset = 0;
        self.dims.windows(2).map(move |w| {
            let (inp, out) = (w[0], w[1]);
            let wslice = &self.params[offset..offset + inp * out];
            let bslice = &self.params[offset + inp * out..offset + inp * out + out];
            offset += inp * out + out;
            (wslice, bslice, inp, out)
        })
    }

    /// Tape-free batched forward pass on `[rows, input_dim]`.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        ensure!(
            input.cols() == self.input_dim(),
            Shape,
            "input has {} features, network expects {}",
            input.cols(),
            self.input_dim()
        );
        let rows = input.rows();
        let last = self.num_layers() - 1;
        let mut h = input.data().to_vec();
        for (k, (w, b, _, out)) in self.layers().enumerate() {
            h = linear_forward(&h, rows, w, out, Some(b));
            if k != last {
                h.iter_mut().for_each(|v| *v = gelu(*v));
            }
        }
        Tensor::matrix(rows, self.output_dim(), h)
    }

    /// Register the parameters on a tape. With `trainable = false` they are
    /// constants: gradients still flow through the network to its input.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundMlp {
        let layers = self
            .layers()
            .map(|(w, b, inp, out)| {
                let wt = Tensor::matrix(out, inp, w.to_vec()).expect("layer shape");
                let bt = Tensor::row(b);
                if trainable {
                    (graph.param(wt), graph.param(bt))
                } else {
                    (graph.constant(wt), graph.constant(bt))
                }
            })
            .collect();
        BoundMlp {
            layers,
            input_dim: self.input_dim(),
            param_count: self.param_count(),
        }
    }
}

/// An [`Mlp`] whose parameters have been placed on a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
    input_dim: usize,
    param_count: usize,
}

impl BoundMlp {
    pub fn forward(&self, graph: &mut Graph, input: Var) -> Result<Var> {
        ensure!(
            graph.value(input).cols() == self.input_dim,
            Shape,
            "input has {} features, network expects {}",
            graph.value(input).cols(),
            self.input_dim
        );
        let last = self.layers.len() - 1;
        let mut h = input;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            h = graph.linear(h, w, Some(b))?;
            if k != last {
                h = graph.gelu(h);
            }
        }
        Ok(h)
    }

    /// Flat gradient in the same layout as [`Mlp::params`]; zeros for
    /// parameters the loss did not reach.
    pub fn grads(&self, graph: &Graph) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count);
        for &(w, b) in &self.layers {
            for v in [w, b] {
                match graph.grad(v) {
                    Some(g) => out.extend_from_slice(g),
                    None => out.extend(std::iter::repeat_n(0.0, graph.value(v).len())),
                }
            }
        }
        out
    }
}
