//! Flow-matching behavioral cloning: loss, SGD trainer and the noise-to-action
//! sampler built on a trained velocity network.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use super::net::{Activation, Layer, NetGrads, VelocityNet};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matops::{ensure_shape, Matrix, Vector};
use crate::rng::{seeded, standard_normal};

/// One flow-matching sample with its noise attached: a⁰ ~ N(0, I), t ~ U[0,1].
///
/// Keeping the draws on the item (not on its batch position) makes the loss
/// invariant under batch permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowItem {
    pub x: Vector,
    pub u: Vector,
    pub a0: Vector,
    pub t: f64,
}

impl FlowItem {
    pub fn draw(x: &Vector, u: &Vector, rng: &mut impl Rng) -> Self {
        let a0 = standard_normal(rng, u.len());
        let t = rng.random::<f64>();
        Self { x: x.clone(), u: u.clone(), a0, t }
    }

    /// aᵗ = (1−t)a⁰ + t·a¹ with a¹ = u.
    pub fn interpolant(&self) -> Vector {
        &self.a0 * (1.0 - self.t) + &self.u * self.t
    }

    /// Regression target a¹ − a⁰.
    pub fn target(&self) -> Vector {
        &self.u - &self.a0
    }
}

/// Mean of ‖v(t, x, aᵗ) − (a¹ − a⁰)‖² over the batch, with its parameter
/// gradient.
pub fn flow_matching_loss(net: &VelocityNet, items: &[FlowItem]) -> Result<(f64, NetGrads)> {
    if items.is_empty() {
        return Err(Error::Input("flow-matching batch is empty".into()));
    }
    let mut grads = NetGrads::zeros_like(net);
    let mut total = 0.0;
    let scale = 1.0 / items.len() as f64;
    for item in items {
        if item.u.len() != net.action_dim() || item.a0.len() != net.action_dim() {
            return Err(Error::Dimension(format!(
                "flow item action dim {} != net action dim {}",
                item.u.len(),
                net.action_dim()
            )));
        }
        let cache = net.forward_cached(item.t, &item.x, &item.interpolant())?;
        let residual = cache.output() - item.target();
        total += residual.norm_squared();
        net.backward(&cache, &(residual * (2.0 * scale)), &mut grads);
    }
    Ok((total * scale, grads))
}

/// Draws fresh per-item noise from `seed` (in batch order) and evaluates the
/// loss.
pub fn flow_matching_loss_seeded(
    net: &VelocityNet,
    batch: &[(Vector, Vector)],
    seed: u64,
) -> Result<(f64, NetGrads)> {
    let mut rng = seeded(seed);
    let items: Vec<FlowItem> = batch.iter().map(|(x, u)| FlowItem::draw(x, u, &mut rng)).collect();
    flow_matching_loss(net, &items)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// μ_b(x, z) = v(1, x, z), a single network evaluation.
    OneStep,
    /// Forward Euler from a = z over the grid s/S, s = 0..S−1 (left endpoints).
    Euler,
}

impl fmt::Display for SampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleMode::OneStep => "one_step",
            SampleMode::Euler => "euler",
        })
    }
}

impl FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_step" => Ok(SampleMode::OneStep),
            "euler" => Ok(SampleMode::Euler),
            other => Err(Error::Input(format!("unknown BC sample mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBCPolicy {
    pub net: VelocityNet,
    pub mode: SampleMode,
    pub euler_steps: usize,
    pub w_z: Matrix,
}

impl FlowBCPolicy {
    pub fn new(net: VelocityNet, mode: SampleMode, euler_steps: usize, w_z: Matrix) -> Result<Self> {
        if euler_steps == 0 {
            return Err(Error::Input("euler_steps must be >= 1".into()));
        }
        ensure_shape(&w_z, net.action_dim(), net.action_dim(), "W_z")?;
        Ok(Self { net, mode, euler_steps, w_z })
    }
}

/// Maps noise z to an action for state x.
pub fn bc_sample(pol: &FlowBCPolicy, x: &Vector, z: &Vector) -> Result<Vector> {
    match pol.mode {
        SampleMode::OneStep => pol.net.forward(1.0, x, z),
        SampleMode::Euler => {
            let steps = pol.euler_steps;
            let dt = 1.0 / steps as f64;
            let mut a = z.clone();
            for s in 0..steps {
                let v = pol.net.forward(s as f64 * dt, x, &a)?;
                a.axpy(dt, &v, 1.0);
            }
            Ok(a)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrainConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: SampleMode,
    pub euler_steps: usize,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            lr: 1e-3,
            batch_size: 256,
            epochs: 100,
            seed: 0,
            mode: SampleMode::Euler,
            euler_steps: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowTrainOutput {
    pub policy: FlowBCPolicy,
    /// Entry 0 is the loss of the initial network over the whole dataset;
    /// entry e ≥ 1 is the mean minibatch loss during epoch e.
    pub loss_trace: Vec<f64>,
}

/// Seeded minibatch SGD on the flow-matching loss.
pub fn train_flow_bc(ds: &Dataset, cfg: &FlowTrainConfig, w_z: Matrix) -> Result<FlowTrainOutput> {
    if ds.is_empty() {
        return Err(Error::Input("cannot train BC on an empty dataset".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Input("batch_size must be >= 1 and lr finite and >= 0".into()));
    }
    let mut rng = seeded(cfg.seed);
    let mut net = VelocityNet::new(ds.n, ds.m, &cfg.hidden, cfg.activation, &mut rng)?;

    let all: Vec<FlowItem> = ds.transitions.iter().map(|tr| FlowItem::draw(&tr.x, &tr.u, &mut rng)).collect();
    let (initial, _) = flow_matching_loss(&net, &all)?;
    let mut trace = vec![initial];

    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<FlowItem> = chunk
                .iter()
                .map(|&i| {
                    let tr = &ds.transitions[i];
                    FlowItem::draw(&tr.x, &tr.u, &mut rng)
                })
                .collect();
            let (loss, grads) = flow_matching_loss(&net, &items)?;
            if !loss.is_finite() {
                return Err(Error::Training { epoch, loss });
            }
            net.sgd_step(&grads, cfg.lr);
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        if !mean.is_finite() || !net.is_finite() {
            return Err(Error::Training { epoch, loss: mean });
        }
        trace.push(mean);
    }
    Ok(FlowTrainOutput { policy: FlowBCPolicy::new(net, cfg.mode, cfg.euler_steps, w_z)?, loss_trace: trace })
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes the policy as flat CSV: header rows (layer dims, activation, mode,
/// Euler steps, W_z) followed by one row per weight matrix (row-major) and per
/// bias vector.
pub fn save_flow_policy(pol: &FlowBCPolicy, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut dims = vec!["layer_dims".to_string()];
    dims.extend(pol.net.layer_dims().iter().map(|d| d.to_string()));
    rows.push(dims);
    rows.push(vec!["activation".into(), pol.net.activation().to_string()]);
    rows.push(vec!["mode".into(), pol.mode.to_string()]);
    rows.push(vec!["euler_steps".into(), pol.euler_steps.to_string()]);
    let mut wz = vec!["w_z".to_string()];
    for i in 0..pol.w_z.nrows() {
        wz.extend(pol.w_z.row(i).iter().map(|&v| fmt_real(v)));
    }
    rows.push(wz);
    for (i, l) in pol.net.layers().iter().enumerate() {
        let mut wr = vec!["weight".to_string(), i.to_string()];
        for r in 0..l.weight.nrows() {
            wr.extend(l.weight.row(r).iter().map(|&v| fmt_real(v)));
        }
        rows.push(wr);
        let mut br = vec!["bias".to_string(), i.to_string()];
        br.extend(l.bias.iter().map(|&v| fmt_real(v)));
        rows.push(br);
    }
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_flow_policy(path: &Path) -> Result<FlowBCPolicy> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        records.push((line, rec.iter().map(str::to_string).collect::<Vec<_>>()));
    }
    let perr = |line: u64, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let field = |idx: usize, key: &str| -> Result<&(u64, Vec<String>)> {
        let rec = records.get(idx).ok_or_else(|| perr(idx as u64 + 1, format!("missing `{key}` row")))?;
        if rec.1.first().map(String::as_str) != Some(key) {
            return Err(perr(rec.0, format!("expected `{key}` row")));
        }
        Ok(rec)
    };
    let parse_usize =
        |line: u64, s: &str| s.parse::<usize>().map_err(|_| perr(line, format!("bad integer `{s}`")));
    let parse_real =
        |line: u64, s: &str| s.parse::<f64>().map_err(|_| perr(line, format!("bad number `{s}`")));

    let (line, dims_row) = field(0, "layer_dims")?;
    let dims = dims_row[1..].iter().map(|s| parse_usize(*line, s)).collect::<Result<Vec<_>>>()?;
    if dims.len() < 2 {
        return Err(perr(*line, "need at least input and output dims".into()));
    }
    let (line, act) = field(1, "activation")?;
    let activation: Activation =
        act.get(1).map_or("", String::as_str).parse().map_err(|e: Error| perr(*line, e.to_string()))?;
    let (line, mode) = field(2, "mode")?;
    let mode: SampleMode =
        mode.get(1).map_or("", String::as_str).parse().map_err(|e: Error| perr(*line, e.to_string()))?;
    let (line, steps) = field(3, "euler_steps")?;
    let euler_steps = parse_usize(*line, steps.get(1).map_or("", String::as_str))?;
    let m = *dims.last().unwrap();
    let (line, wz) = field(4, "w_z")?;
    if wz.len() != 1 + m * m {
        return Err(perr(*line, format!("w_z needs {} values", m * m)));
    }
    let wz_vals = wz[1..].iter().map(|s| parse_real(*line, s)).collect::<Result<Vec<_>>>()?;
    let w_z = Matrix::from_row_slice(m, m, &wz_vals);

    let mut layers = Vec::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let (line, wr) = field(5 + 2 * i, "weight")?;
        if wr.len() != 2 + fan_in * fan_out {
            return Err(perr(
                *line,
                format!(
                    "layer {i} weight needs {} values, got {}",
                    fan_in * fan_out,
                    wr.len().saturating_sub(2)
                ),
            ));
        }
        let wv = wr[2..].iter().map(|s| parse_real(*line, s)).collect::<Result<Vec<_>>>()?;
        let (line, br) = field(6 + 2 * i, "bias")?;
        if br.len() != 2 + fan_out {
            return Err(perr(*line, format!("layer {i} bias needs {fan_out} values")));
        }
        let bv = br[2..].iter().map(|s| parse_real(*line, s)).collect::<Result<Vec<_>>>()?;
        layers
            .push(Layer { weight: Matrix::from_row_slice(fan_out, fan_in, &wv), bias: Vector::from_vec(bv) });
    }
    let net = VelocityNet::from_layers(layers, activation)?;
    FlowBCPolicy::new(net, mode, euler_steps, w_z)
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { path: path.to_path_buf(), line, msg: format!("{other:?}") },
    }
}
