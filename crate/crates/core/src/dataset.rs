//! Expert demonstrations on the linearized pendulum: generator, replay buffer,
//! CSV persistence and the second moments consumed by the trainer.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::bc::{csv_err, BehaviorPolicy};
use crate::error::{Error, Result};
use crate::lqr::{optimal_lqr_gain, receding_horizon_gain, LinearSystem, QuadraticCost};
use crate::matops::{ensure_shape, symmetrize, Matrix, Vector};
use crate::rng::{seeded, stream_seed, GaussianSampler};

/// Physical constants and actuator/state limits of the pendulum.
#[derive(Clone, Debug, PartialEq)]
pub struct PendulumParams {
    pub mass: f64,
    pub length: f64,
    pub damping: f64,
    pub gravity: f64,
    pub dt: f64,
    pub torque_limit: f64,
    pub speed_limit: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            length: 1.0,
            damping: 0.0,
            gravity: 10.0,
            dt: 0.05,
            torque_limit: 2.0,
            speed_limit: 8.0,
        }
    }
}

impl PendulumParams {
    /// dt = 0 is accepted (it yields A = I, B = 0); everything else must be positive.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("length", self.length),
            ("torque_limit", self.torque_limit),
            ("speed_limit", self.speed_limit),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("pendulum {name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("dt", self.dt), ("damping", self.damping), ("gravity", self.gravity)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Input(format!("pendulum {name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn inertia(&self) -> f64 {
        self.mass * self.length * self.length
    }
}

pub const PENDULUM_PROCESS_NOISE: f64 = 1e-4;

/// Euler discretization of the pendulum linearized at the upright position,
/// with W_w = 1e-4·I.
pub fn pendulum_system(p: &PendulumParams) -> Result<LinearSystem> {
    p.validate()?;
    let dt = p.dt;
    let a = Matrix::from_row_slice(
        2,
        2,
        &[1.0, dt, -(p.gravity / p.length) * dt, 1.0 - (p.damping / p.inertia()) * dt],
    );
    let b = Matrix::from_row_slice(2, 1, &[0.0, dt / p.inertia()]);
    LinearSystem::new(a, b, Matrix::identity(2, 2) * PENDULUM_PROCESS_NOISE)
}

/// Clips every action entry to ±torque_limit.
pub fn clip_action(u: &mut Vector, p: &PendulumParams) {
    u.apply(|v| *v = v.clamp(-p.torque_limit, p.torque_limit));
}

/// Clips the angular-speed component (index 1) to ±speed_limit.
pub fn clip_state(x: &mut Vector, p: &PendulumParams) {
    if x.len() > 1 {
        x[1] = x[1].clamp(-p.speed_limit, p.speed_limit);
    }
}

/// How each episode's first state is drawn.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    /// θ ~ U[−π, π], every other component 0.
    UniformAngle,
    Fixed(Vector),
    Gaussian(Matrix),
}

impl InitialState {
    pub(crate) fn sampler(&self, n: usize) -> Result<InitSampler> {
        Ok(match self {
            InitialState::UniformAngle => InitSampler::UniformAngle(n),
            InitialState::Fixed(x) => {
                if x.len() != n {
                    return Err(Error::Dimension(format!(
                        "initial state has {} entries, expected {n}",
                        x.len()
                    )));
                }
                InitSampler::Fixed(x.clone())
            }
            InitialState::Gaussian(cov) => {
                ensure_shape(cov, n, n, "initial covariance")?;
                InitSampler::Gaussian(GaussianSampler::new(cov)?)
            }
        })
    }
}

pub(crate) enum InitSampler {
    UniformAngle(usize),
    Fixed(Vector),
    Gaussian(GaussianSampler),
}

impl InitSampler {
    pub(crate) fn draw(&self, rng: &mut impl Rng) -> Vector {
        match self {
            InitSampler::UniformAngle(n) => {
                let mut x = Vector::zeros(*n);
                x[0] = rng.random_range(-PI..=PI);
                x
            }
            InitSampler::Fixed(x) => x.clone(),
            InitSampler::Gaussian(s) => s.sample(rng),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExpertKind {
    /// Infinite-horizon LQR gain.
    Lqr,
    /// First gain of a finite-horizon Riccati pass, reapplied every step.
    RecedingHorizon {
        horizon: usize,
    },
    Gain(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSpec {
    pub kind: ExpertKind,
    /// Std of the Gaussian exploration noise added to each expert action.
    pub noise_std: f64,
}

impl Default for ExpertSpec {
    fn default() -> Self {
        Self { kind: ExpertKind::Lqr, noise_std: 0.05 }
    }
}

impl ExpertSpec {
    pub fn gain(&self, sys: &LinearSystem, cost: &QuadraticCost) -> Result<Matrix> {
        let k = match &self.kind {
            ExpertKind::Lqr => optimal_lqr_gain(sys, cost)?,
            ExpertKind::RecedingHorizon { horizon } => receding_horizon_gain(sys, cost, *horizon)?,
            ExpertKind::Gain(k) => {
                ensure_shape(k, sys.m(), sys.n(), "expert gain")?;
                k.clone()
            }
        };
        sys.stable_closed_loop(&k, "expert gain")?;
        Ok(k)
    }

    fn describe(&self) -> String {
        let kind = match &self.kind {
            ExpertKind::Lqr => "lqr".to_string(),
            ExpertKind::RecedingHorizon { horizon } => format!("receding_horizon({horizon})"),
            ExpertKind::Gain(_) => "gain".to_string(),
        };
        format!("expert={kind} noise_std={}", self.noise_std)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub expert: ExpertSpec,
    pub episodes: usize,
    pub horizon: usize,
    pub init: InitialState,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { expert: ExpertSpec::default(), episodes: 50, horizon: 200, init: InitialState::UniformAngle }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub x: Vector,
    pub u: Vector,
    pub c: f64,
    pub x_next: Vector,
}

/// Replay buffer of expert transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    pub generator: String,
    pub transitions: Vec<Transition>,
}

impl Dataset {
    pub fn new(
        n: usize,
        m: usize,
        seed: u64,
        generator: impl Into<String>,
        transitions: Vec<Transition>,
    ) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::Dimension("dataset dims must be positive".into()));
        }
        let generator = generator.into();
        if generator.contains([',', '\n', '\r', '"']) {
            return Err(Error::Input(
                "generator description may not contain commas, quotes or newlines".into(),
            ));
        }
        for (i, t) in transitions.iter().enumerate() {
            if t.x.len() != n || t.u.len() != m || t.x_next.len() != n {
                return Err(Error::Dimension(format!("transition {i} does not match dims n={n}, m={m}")));
            }
            let finite = t.x.iter().chain(t.u.iter()).chain(t.x_next.iter()).all(|v| v.is_finite());
            if !finite || !t.c.is_finite() {
                return Err(Error::Input(format!("transition {i} has non-finite values")));
            }
        }
        Ok(Self { n, m, seed, generator, transitions })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

fn simulate_episode(
    sys: &LinearSystem,
    cost: &QuadraticCost,
    gain: &Matrix,
    exploration: &GaussianSampler,
    process: &GaussianSampler,
    init: &InitSampler,
    limits: &PendulumParams,
    horizon: usize,
    seed: u64,
) -> Vec<Transition> {
    let mut rng = seeded(seed);
    let mut x = init.draw(&mut rng);
    clip_state(&mut x, limits);
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let mut u = gain * &x + exploration.sample(&mut rng);
        clip_action(&mut u, limits);
        let w = process.sample(&mut rng);
        let mut x_next = sys.step(&x, &u, &w);
        clip_state(&mut x_next, limits);
        let c = cost.stage_cost(&x, &u);
        out.push(Transition { x: std::mem::replace(&mut x, x_next.clone()), u, c, x_next });
    }
    out
}

/// Rolls out the (noisy, clipped) expert for `episodes` independent episodes.
/// Episode e uses its own stream seeded from (seed, e) and episodes are
/// concatenated in index order, so the result does not depend on scheduling.
pub fn generate_expert_dataset(
    sys: &LinearSystem,
    cost: &QuadraticCost,
    cfg: &GeneratorConfig,
    limits: &PendulumParams,
    seed: u64,
) -> Result<Dataset> {
    limits.validate()?;
    let std = cfg.expert.noise_std;
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Input(format!("expert noise std must be >= 0, got {std}")));
    }
    let gain = cfg.expert.gain(sys, cost)?;
    let exploration = GaussianSampler::new(&(Matrix::identity(sys.m(), sys.m()) * (std * std)))?;
    let process = GaussianSampler::new(&sys.w_w)?;
    let init = cfg.init.sampler(sys.n())?;
    let episodes: Vec<Vec<Transition>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| {
            simulate_episode(
                sys,
                cost,
                &gain,
                &exploration,
                &process,
                &init,
                limits,
                cfg.horizon,
                stream_seed(seed, e as u64),
            )
        })
        .collect();
    let generator =
        format!("pendulum {} episodes={} horizon={}", cfg.expert.describe(), cfg.episodes, cfg.horizon);
    Dataset::new(sys.n(), sys.m(), seed, generator, episodes.into_iter().flatten().collect())
}

/// Empirical state moments E_D[x xᵀ] and E_D[x].
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub sigma_d: Matrix,
    pub mean_x: Vector,
    pub count: usize,
}

pub fn dataset_moments(ds: &Dataset) -> Result<Moments> {
    if ds.is_empty() {
        return Err(Error::Input("moments of an empty dataset".into()));
    }
    let mut sigma = Matrix::zeros(ds.n, ds.n);
    let mut mean = Vector::zeros(ds.n);
    for t in &ds.transitions {
        sigma.ger(1.0, &t.x, &t.x, 1.0);
        mean += &t.x;
    }
    let count = ds.len();
    let inv = 1.0 / count as f64;
    Ok(Moments { sigma_d: symmetrize(&(sigma * inv)), mean_x: mean * inv, count })
}

/// C_b = E[μ_b(x, z) xᵀ] and β_b = E‖μ_b(x, z) − z‖² over x ~ D, z ~ N(0, W_z).
#[derive(Clone, Debug, PartialEq)]
pub struct CrossMoment {
    pub c_b: Matrix,
    pub beta_b: f64,
}

/// Exact for a linear BC policy (C_b = K_b Σ_D, β_b = Tr(K_bᵀK_bΣ_D));
/// otherwise a Monte-Carlo average over `noise_samples` draws per state.
pub fn bc_cross_moment(
    ds: &Dataset,
    bc: &dyn BehaviorPolicy,
    noise_samples: usize,
    seed: u64,
) -> Result<CrossMoment> {
    cross_moment(ds, bc, noise_samples, seed, false)
}

/// Monte-Carlo estimate with antithetic pairs (z, −z); `noise_samples` counts
/// pairs. Terms odd in z cancel exactly.
pub fn bc_cross_moment_antithetic(
    ds: &Dataset,
    bc: &dyn BehaviorPolicy,
    noise_samples: usize,
    seed: u64,
) -> Result<CrossMoment> {
    cross_moment(ds, bc, noise_samples, seed, true)
}

fn cross_moment(
    ds: &Dataset,
    bc: &dyn BehaviorPolicy,
    noise_samples: usize,
    seed: u64,
    antithetic: bool,
) -> Result<CrossMoment> {
    if bc.state_dim() != ds.n || bc.action_dim() != ds.m {
        return Err(Error::Dimension(format!(
            "BC policy maps R^{} to R^{}, dataset has n={}, m={}",
            bc.state_dim(),
            bc.action_dim(),
            ds.n,
            ds.m
        )));
    }
    let moments = dataset_moments(ds)?;
    if let Some(k_b) = bc.linear_gain() {
        let c_b = k_b * &moments.sigma_d;
        let beta_b = (k_b.transpose() * &c_b).trace();
        return Ok(CrossMoment { c_b, beta_b });
    }
    if noise_samples == 0 {
        return Err(Error::Input("noise_samples must be >= 1".into()));
    }
    let sampler = GaussianSampler::new(&bc.noise_covariance())?;
    let per_state: Vec<Result<(Matrix, f64)>> = ds
        .transitions
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = seeded(stream_seed(seed, i as u64));
            let mut acc = Matrix::zeros(ds.m, ds.n);
            let mut beta = 0.0;
            for _ in 0..noise_samples {
                let z = sampler.sample(&mut rng);
                let draws: &[Vector] =
                    if antithetic { &[z.clone(), -z.clone()] } else { std::slice::from_ref(&z) };
                for z in draws {
                    let a = bc.act(&t.x, z)?;
                    acc.ger(1.0, &a, &t.x, 1.0);
                    beta += (&a - z).norm_squared();
                }
            }
            Ok((acc, beta))
        })
        .collect();
    let mut c_b = Matrix::zeros(ds.m, ds.n);
    let mut beta_b = 0.0;
    for r in per_state {
        let (acc, beta) = r?;
        c_b += acc;
        beta_b += beta;
    }
    let draws = (ds.len() * noise_samples * if antithetic { 2 } else { 1 }) as f64;
    Ok(CrossMoment { c_b: c_b / draws, beta_b: beta_b / draws })
}

const HEADER: [&str; 4] = ["n", "m", "seed", "generator"];

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn column_names(n: usize, m: usize) -> Vec<String> {
    let mut cols: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
    cols.extend((1..=m).map(|i| format!("u{i}")));
    cols.push("c".into());
    cols.extend((1..=n).map(|i| format!("x_next{i}")));
    cols
}

/// CSV layout: `n,m,seed,generator` header and its values, a column-name row
/// `x1..xn,u1..um,c,x_next1..x_nextn`, then one row per transition. Reals are
/// written with 17 significant digits.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut put = |rec: Vec<String>| w.write_record(&rec).map_err(|e| csv_err(path, e));
    put(HEADER.iter().map(|s| s.to_string()).collect())?;
    put(vec![ds.n.to_string(), ds.m.to_string(), ds.seed.to_string(), ds.generator.clone()])?;
    put(column_names(ds.n, ds.m))?;
    for t in &ds.transitions {
        let mut row: Vec<String> = t.x.iter().chain(t.u.iter()).map(|&v| fmt_real(v)).collect();
        row.push(fmt_real(t.c));
        row.extend(t.x_next.iter().map(|&v| fmt_real(v)));
        put(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let perr = |line: u64, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut records = reader.records();
    let mut next = |what: &str| -> Result<(u64, csv::StringRecord)> {
        let rec = records
            .next()
            .ok_or_else(|| perr(0, format!("missing {what}")))?
            .map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        Ok((line, rec))
    };
    let (line, header) = next("header row")?;
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(perr(line, "expected header `n,m,seed,generator`".into()));
    }
    let (line, meta) = next("metadata row")?;
    if meta.len() != 4 {
        return Err(perr(line, format!("metadata row needs 4 fields, got {}", meta.len())));
    }
    let n: usize = meta[0].parse().map_err(|_| perr(line, format!("bad n `{}`", &meta[0])))?;
    let m: usize = meta[1].parse().map_err(|_| perr(line, format!("bad m `{}`", &meta[1])))?;
    let seed: u64 = meta[2].parse().map_err(|_| perr(line, format!("bad seed `{}`", &meta[2])))?;
    let generator = meta[3].to_string();
    let (line, cols) = next("column row")?;
    if cols.iter().collect::<Vec<_>>() != column_names(n, m) {
        return Err(perr(line, "column names do not match n and m".into()));
    }
    let width = 2 * n + m + 1;
    let mut transitions = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(perr(line, format!("row has {} fields, expected {width}", rec.len())));
        }
        let vals = rec
            .iter()
            .map(|s| s.trim().parse::<f64>().map_err(|_| perr(line, format!("bad number `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        transitions.push(Transition {
            x: Vector::from_column_slice(&vals[..n]),
            u: Vector::from_column_slice(&vals[n..n + m]),
            c: vals[n + m],
            x_next: Vector::from_column_slice(&vals[n + m + 1..]),
        });
    }
    Dataset::new(n, m, seed, generator, transitions)
}
