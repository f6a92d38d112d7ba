//! Fully connected velocity network v(t, x, a) with hand-written reverse mode.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::matops::{Matrix, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// No nonlinearity; the whole network is then affine in its input.
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Input(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// out × in
    pub weight: Matrix,
    pub bias: Vector,
}

/// MLP from (t, x, a) ∈ R^{1+n+m} to R^m. Hidden layers use `activation`,
/// the output layer is linear.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNet {
    layers: Vec<Layer>,
    activation: Activation,
    state_dim: usize,
    action_dim: usize,
}

/// Parameter-shaped gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<Layer>,
}

impl NetGrads {
    pub fn zeros_like(net: &VelocityNet) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: Vector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        // row-major weights, then bias
        for i in 0..l.weight.nrows() {
            out.extend(l.weight.row(i).iter());
        }
        out.extend(l.bias.iter());
    }
    out
}

/// Activations retained from a forward pass for the backward pass.
pub struct ForwardCache {
    /// outputs[0] is the input; outputs[i+1] is the output of layer i
    outputs: Vec<Vector>,
}

impl ForwardCache {
    pub fn output(&self) -> &Vector {
        self.outputs.last().expect("nonempty cache")
    }
}

impl VelocityNet {
    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero biases.
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || hidden.contains(&0) {
            return Err(Error::Input("network dimensions must be positive".into()));
        }
        let mut dims = vec![1 + state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(action_dim);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weight: Matrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-limit..=limit)),
                    bias: Vector::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self { layers, activation, state_dim, action_dim })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Input("network needs at least one layer".into()))?;
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::Dimension(format!("layer {i}: bias/weight mismatch")));
            }
            if i > 0 && layers[i - 1].weight.nrows() != l.weight.ncols() {
                return Err(Error::Dimension(format!("layer {i}: input width mismatch")));
            }
            if l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("layer {i}: non-finite parameter")));
            }
        }
        let action_dim = layers.last().unwrap().weight.nrows();
        let input = first.weight.ncols();
        if input < 2 + action_dim {
            return Err(Error::Dimension(format!(
                "input width {input} too small for action dim {action_dim}"
            )));
        }
        Ok(Self { state_dim: input - 1 - action_dim, action_dim, layers, activation })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// [input, hidden..., output]
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.ncols()];
        dims.extend(self.layers.iter().map(|l| l.weight.nrows()));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for i in 0..l.weight.nrows() {
                for j in 0..l.weight.ncols() {
                    l.weight[(i, j)] = it.next().unwrap();
                }
            }
            for v in l.bias.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        Ok(())
    }

    fn input(&self, t: f64, x: &Vector, a: &Vector) -> Result<Vector> {
        if x.len() != self.state_dim || a.len() != self.action_dim {
            return Err(Error::Dimension(format!(
                "velocity net expects x in R^{}, a in R^{}, got {} and {}",
                self.state_dim,
                self.action_dim,
                x.len(),
                a.len()
            )));
        }
        let mut input = Vector::zeros(1 + self.state_dim + self.action_dim);
        input[0] = t;
        input.rows_mut(1, self.state_dim).copy_from(x);
        input.rows_mut(1 + self.state_dim, self.action_dim).copy_from(a);
        Ok(input)
    }

    pub fn forward_cached(&self, t: f64, x: &Vector, a: &Vector) -> Result<ForwardCache> {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(self.input(t, x, a)?);
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = &l.weight * outputs.last().unwrap() + &l.bias;
            if i < last {
                let act = self.activation;
                z.apply(|v| *v = act.apply(*v));
            }
            outputs.push(z);
        }
        Ok(ForwardCache { outputs })
    }

    pub fn forward(&self, t: f64, x: &Vector, a: &Vector) -> Result<Vector> {
        Ok(self.forward_cached(t, x, a)?.outputs.pop().unwrap())
    }

    /// Accumulates ∂L/∂θ into `grads` given ∂L/∂output.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Vector, grads: &mut NetGrads) {
        let mut delta = d_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.outputs[i];
            let g = &mut grads.layers[i];
            g.weight.ger(1.0, &delta, input, 1.0);
            g.bias += &delta;
            if i == 0 {
                break;
            }
            let mut back = self.layers[i].weight.transpose() * &delta;
            let act = self.activation;
            back.zip_apply(input, |d, y| *d *= act.derivative_from_output(y));
            delta = back;
        }
    }

    /// θ ← θ − lr·g
    pub fn sgd_step(&mut self, grads: &NetGrads, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weight.zip_apply(&g.weight, |w, d| *w -= lr * d);
            l.bias.axpy(-lr, &g.bias, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}
