use serde::{Deserialize, Serialize};

use crate::linalg::{matmul, matmul_at, matmul_bt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Layer widths `[input, hidden…, output]`. Parameters live in one flat
/// slice: for each layer a row-major `out×in` weight followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
}

/// Intermediate values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape {
    batch: usize,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self { dims, activation }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight_offset, bias_offset, in, out)` for layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut off = 0;
        for w in self.dims.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        let (i, o) = (self.dims[l], self.dims[l + 1]);
        (off, off + i * o, i, o)
    }

    pub fn forward(&self, params: &[f64], input: &[f64], batch: usize) -> (Vec<f64>, MlpTape) {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(input.len(), batch * self.dims[0]);
        let mut pre = Vec::with_capacity(self.layers() - 1);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(self.layers() - 1);
        let mut output = Vec::new();
        for l in 0..self.layers() {
            let (w, b, i, o) = self.layer_offsets(l);
            let x: &[f64] = if l == 0 { input } else { &post[l - 1] };
            let mut a = vec![0.0; batch * o];
            for row in a.chunks_mut(o) {
                row.copy_from_slice(&params[b..b + o]);
            }
            matmul_bt(x, &params[w..w + i * o], &mut a, batch, i, o, true);
            if l + 1 == self.layers() {
                output = a;
            } else {
                let h: Vec<f64> = a.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(a);
                post.push(h);
            }
        }
        let tape = MlpTape {
            batch,
            input: input.to_vec(),
            pre,
            post,
        };
        (output, tape)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input rows.
    pub fn backward(&self, params: &[f64], tape: &MlpTape, d_output: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let batch = tape.batch;
        let mut delta = d_output.to_vec();
        for l in (0..self.layers()).rev() {
            let (w, b, i, o) = self.layer_offsets(l);
            let x: &[f64] = if l == 0 { &tape.input } else { &tape.post[l - 1] };
            matmul_at(&delta, x, &mut grad[w..w + i * o], batch, o, i, true);
            for row in delta.chunks(o) {
                for (g, d) in grad[b..b + o].iter_mut().zip(row) {
                    *g += d;
                }
            }
            let mut d_x = vec![0.0; batch * i];
            matmul(&delta, &params[w..w + i * o], &mut d_x, batch, o, i, false);
            if l > 0 {
                for (d, &a) in d_x.iter_mut().zip(&tape.pre[l - 1]) {
                    *d *= self.activation.derivative(a);
                }
            }
            delta = d_x;
        }
        delta
    }
}
