//! A small dense feedforward network with hand-written reverse-mode gradients
//! and the Adam optimizer.
//!
//! Both networks used by the neural solver share one shape: input `d + 1`
//! (ratio first, then the drift estimate), hidden layers of `d + 20` and
//! `d + 10` ELU units, and a sigmoid output layer of size `d` (controls) or
//! `1` (value). Inputs pass through a fixed affine standardization and the
//! output through a fixed affine map; neither is trained.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NET_FORMAT: &str = "ddlearn-dense-net";
pub const NET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Elu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Elu => elu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

/// ELU with `α = 1`.
#[inline]
pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Weights uniform on `(0, 1)`.
    Uniform01,
    /// Weights uniform on `±sqrt(6 / fan_in)`.
    HeUniform,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub format: String,
    pub version: u32,
    pub sizes: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
    /// Per layer: weights (`out × in`, row-major) followed by biases.
    pub params: Vec<f64>,
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub output_shift: f64,
    pub output_scale: f64,
    /// L2 coefficient on the weights (biases are not penalized).
    pub l2: f64,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

/// Parameter count of a dense stack with the given layer sizes.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Layer sizes of the control (`out = d`) or value (`out = 1`) network.
pub fn architecture(d: usize, out: usize) -> Vec<usize> {
    vec![d + 1, d + 20, d + 10, out]
}

impl DenseNet {
    pub fn new<R: Rng + ?Sized>(sizes: Vec<usize>, init: Init, l2: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "a network needs input and output layers");
        let mut params = Vec::with_capacity(param_count(&sizes));
        for w in sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(match init {
                    Init::Uniform01 => rng.random::<f64>(),
                    Init::HeUniform => rng.random_range(-limit..limit),
                    Init::Zeros => 0.0,
                });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        let n_in = sizes[0];
        Self {
            format: NET_FORMAT.to_string(),
            version: NET_VERSION,
            sizes,
            hidden: Activation::Elu,
            output: Activation::Sigmoid,
            params,
            input_shift: vec![0.0; n_in],
            input_scale: vec![1.0; n_in],
            output_shift: 0.0,
            output_scale: 1.0,
            l2,
        }
    }

    pub fn control<R: Rng + ?Sized>(d: usize, init: Init, l2: f64, rng: &mut R) -> Self {
        Self::new(architecture(d, d), init, l2, rng)
    }

    pub fn value<R: Rng + ?Sized>(d: usize, init: Init, l2: f64, rng: &mut R) -> Self {
        Self::new(architecture(d, 1), init, l2, rng)
    }

    pub fn with_input_standardization(mut self, shift: Vec<f64>, scale: Vec<f64>) -> Self {
        assert_eq!(shift.len(), self.sizes[0]);
        assert_eq!(scale.len(), self.sizes[0]);
        self.input_shift = shift;
        self.input_scale = scale;
        self
    }

    pub fn with_output_map(mut self, shift: f64, scale: f64) -> Self {
        self.output_shift = shift;
        self.output_scale = scale;
        self
    }

    pub fn n_inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offsets of (weights, biases) of layer `l` in `params`.
    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let off: usize = self.sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (off, off + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.n_inputs() {
            return Err(Error::Shape { expected: self.n_inputs(), got: input.len() });
        }
        let mut tape = Tape::default();
        self.forward_tape(input, &mut tape);
        Ok(tape.out)
    }

    /// Forward pass recording activations; `input` must have the right length.
    pub fn forward_tape(&self, input: &[f64], tape: &mut Tape) {
        let nl = self.n_layers();
        tape.pre.resize(nl, Vec::new());
        tape.post.resize(nl + 1, Vec::new());
        let x0 = &mut tape.post[0];
        x0.clear();
        x0.extend(input.iter().zip(&self.input_shift).zip(&self.input_scale).map(|((x, s), c)| (x - s) * c));
        for l in 0..nl {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let act = if l + 1 == nl { self.output } else { self.hidden };
            let (before, after) = tape.post.split_at_mut(l + 1);
            let x = &before[l];
            let pre = &mut tape.pre[l];
            let post = &mut after[0];
            pre.clear();
            post.clear();
            for o in 0..n_out {
                let row = &self.params[wo + o * n_in..wo + (o + 1) * n_in];
                let z = self.params[bo + o] + row.iter().zip(x.iter()).map(|(w, v)| w * v).sum::<f64>();
                pre.push(z);
                post.push(act.apply(z));
            }
        }
        tape.out.clear();
        let last = &tape.post[nl];
        tape.out.extend(last.iter().map(|y| self.output_shift + self.output_scale * y));
    }

    /// Accumulates `∂L/∂params` into `grad` given `∂L/∂output`, and optionally
    /// writes `∂L/∂input` (with respect to the raw, unstandardized input).
    pub fn backward(&self, tape: &Tape, dout: &[f64], mut grad: Option<&mut [f64]>, dinput: Option<&mut [f64]>) {
        let nl = self.n_layers();
        let mut delta: Vec<f64> = dout.iter().map(|g| g * self.output_scale).collect();
        for l in (0..nl).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (wo, bo) = self.layer_offsets(l);
            let act = if l + 1 == nl { self.output } else { self.hidden };
            let pre = &tape.pre[l];
            let post_out = &tape.post[l + 1];
            let x = &tape.post[l];
            for o in 0..n_out {
                delta[o] *= act.derivative(pre[o], post_out[o]);
            }
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let dz = delta[o];
                if dz == 0.0 {
                    continue;
                }
                let w = &self.params[wo + o * n_in..wo + (o + 1) * n_in];
                if let Some(g) = grad.as_deref_mut() {
                    g[bo + o] += dz;
                    let gw = &mut g[wo + o * n_in..wo + (o + 1) * n_in];
                    for i in 0..n_in {
                        gw[i] += dz * x[i];
                    }
                }
                for i in 0..n_in {
                    prev[i] += dz * w[i];
                }
            }
            delta = prev;
        }
        if let Some(di) = dinput {
            for (i, v) in di.iter_mut().enumerate() {
                *v = delta[i] * self.input_scale[i];
            }
        }
    }

    /// `l2 · Σ w²` over weights.
    pub fn l2_penalty(&self) -> f64 {
        (0..self.n_layers())
            .map(|l| {
                let (wo, bo) = self.layer_offsets(l);
                self.params[wo..bo].iter().map(|w| w * w).sum::<f64>()
            })
            .sum::<f64>()
            * self.l2
    }

    pub fn add_l2_grad(&self, grad: &mut [f64]) {
        if self.l2 == 0.0 {
            return;
        }
        for l in 0..self.n_layers() {
            let (wo, bo) = self.layer_offsets(l);
            for i in wo..bo {
                grad[i] += 2.0 * self.l2 * self.params[i];
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let net: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if net.format != NET_FORMAT || net.version != NET_VERSION {
            return Err(Error::Parameter(format!("unsupported network file {} v{}", net.format, net.version)));
        }
        if net.params.len() != param_count(&net.sizes) {
            return Err(Error::Shape { expected: param_count(&net.sizes), got: net.params.len() });
        }
        Ok(net)
    }
}

/// Mean batch loss plus the L2 term, and its gradient.
///
/// `loss(i, output)` returns the loss of sample `i` and its derivative with
/// respect to the network output.
pub fn grad<F>(net: &DenseNet, batch: &[Vec<f64>], mut loss: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(usize, &[f64]) -> (f64, Vec<f64>),
{
    let mut g = vec![0.0; net.n_params()];
    let mut tape = Tape::default();
    let mut total = 0.0;
    let n = batch.len().max(1) as f64;
    for (i, x) in batch.iter().enumerate() {
        if x.len() != net.n_inputs() {
            return Err(Error::Shape { expected: net.n_inputs(), got: x.len() });
        }
        net.forward_tape(x, &mut tape);
        let (l, dl) = loss(i, tape.output());
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { index: i, value: l });
        }
        total += l;
        let dl: Vec<f64> = dl.iter().map(|v| v / n).collect();
        net.backward(&tape, &dl, Some(&mut g), None);
    }
    net.add_l2_grad(&mut g);
    Ok((total / n + net.l2_penalty(), g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub fn adam_step(state: &mut AdamState, net: &mut DenseNet, gradient: &[f64]) {
    state.step(&mut net.params, gradient);
}
