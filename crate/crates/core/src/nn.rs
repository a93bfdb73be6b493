//! Minimal feed-forward networks over a flat `f64` parameter vector with
//! hand-written backpropagation and an Adam optimizer.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, param_err, Result};

/// SiLU, `x · sigmoid(x)`.
fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Fully connected network with SiLU hidden activations and a linear output.
///
/// Layer `l` stores its `out × in` weight matrix row-major, followed by its
/// bias, in `params`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Vec<f64>>,
}

pub fn num_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Weights drawn from `N(0, 1/fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes)?;
        let mut offset = 0;
        for w in sizes.windows(2) {
            let scale = (1.0 / w[0] as f64).sqrt();
            for p in &mut net.params[offset..offset + w[0] * w[1]] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
            offset += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(param_err(format!("invalid layer sizes {sizes:?}")));
        }
        Ok(Self { sizes: sizes.to_vec(), params: vec![0.0; num_params(sizes)] })
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(sizes)?;
        if params.len() != net.params.len() {
            return Err(dim_err(format!("expected {} parameters, got {}", net.params.len(), params.len())));
        }
        Ok(Self { params, ..net })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.run(x, None)
    }

    /// Forward pass that records what [`Mlp::backward`] needs.
    pub fn forward_tape(&self, x: &[f64]) -> (Vec<f64>, Tape) {
        let mut tape = Tape { inputs: Vec::with_capacity(self.sizes.len()), pre: Vec::new() };
        let out = self.run(x, Some(&mut tape));
        (out, tape)
    }

    fn run(&self, x: &[f64], mut tape: Option<&mut Tape>) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim(), "network input dimension");
        let layers = self.sizes.len() - 1;
        let mut h = x.to_vec();
        let mut offset = 0;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let mut z: Vec<f64> = bias.to_vec();
            for (zo, row) in z.iter_mut().zip(weights.chunks_exact(n_in)) {
                *zo += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
            }
            offset += n_in * n_out + n_out;
            let last = l + 1 == layers;
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(std::mem::take(&mut h));
                if !last {
                    t.pre.push(z.clone());
                }
            }
            h = if last { z } else { z.into_iter().map(silu).collect() };
        }
        h
    }

    /// Accumulates `∂(grad_out · f(x)) / ∂θ` into `grad` and returns the
    /// gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        assert_eq!(grad.len(), self.params.len(), "gradient buffer size");
        let layers = self.sizes.len() - 1;
        let mut delta = grad_out.to_vec();
        let mut offset = self.params.len();
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            offset -= n_in * n_out + n_out;
            if l + 1 < layers {
                for (d, &z) in delta.iter_mut().zip(&tape.pre[l]) {
                    *d *= silu_grad(z);
                }
            }
            let input = &tape.inputs[l];
            let weights = &self.params[offset..offset + n_in * n_out];
            let (gw, gb) = grad[offset..offset + n_in * n_out + n_out].split_at_mut(n_in * n_out);
            let mut next = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                gb[o] += d;
                let grow = &mut gw[o * n_in..(o + 1) * n_in];
                let wrow = &weights[o * n_in..(o + 1) * n_in];
                for i in 0..n_in {
                    grow[i] += d * input[i];
                    next[i] += d * wrow[i];
                }
            }
            delta = next;
        }
        delta
    }
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
        }
    }
}

/// Sinusoidal embedding of a (diffusion) timestep.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    out.resize(dim, 0.0);
    out
}
