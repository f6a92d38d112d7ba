//! Closed-loop evaluation rollouts with confidence intervals.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::{clip_action, clip_state, InitialState, PendulumParams};
use crate::error::{Error, Result};
use crate::lqr::{GainPolicy, LinearSystem, QuadraticCost};
use crate::matops::{ensure_shape, Vector};
use crate::rng::{seeded, stream_seed, GaussianSampler};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalEnv {
    /// The linear model with actuator and speed clipping.
    LinearClipped,
    /// Euler-discretized θ̈ = −(g/l)sin θ − (b/ml²)θ̇ + u/ml², whose
    /// linearization at θ = 0 is the linear model.
    NonlinearPendulum,
}

impl fmt::Display for EvalEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalEnv::LinearClipped => "linear_clipped",
            EvalEnv::NonlinearPendulum => "nonlinear_pendulum",
        })
    }
}

impl FromStr for EvalEnv {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_clipped" => Ok(EvalEnv::LinearClipped),
            "nonlinear_pendulum" => Ok(EvalEnv::NonlinearPendulum),
            other => Err(Error::Config(format!("unknown eval env `{other}`"))),
        }
    }
}

/// The environment a policy is rolled out in.
#[derive(Clone, Debug)]
pub struct EvalSetup {
    pub env: EvalEnv,
    /// Supplies A, B (linear env) and W_w (both envs).
    pub sys: LinearSystem,
    pub cost: QuadraticCost,
    pub limits: PendulumParams,
    pub init: InitialState,
}

impl EvalSetup {
    fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        match self.env {
            EvalEnv::LinearClipped => self.sys.step(x, u, w),
            EvalEnv::NonlinearPendulum => {
                let p = &self.limits;
                let inertia = p.mass * p.length * p.length;
                let (theta, omega) = (x[0], x[1]);
                let accel =
                    -(p.gravity / p.length) * theta.sin() - (p.damping / inertia) * omega + u[0] / inertia;
                Vector::from_vec(vec![theta + p.dt * omega, omega + p.dt * accel]) + w
            }
        }
    }
}

/// Per-rollout episodic costs and their summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub costs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for one rollout).
    pub std: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl EvalReport {
    pub fn from_costs(costs: Vec<f64>) -> Result<Self> {
        if costs.is_empty() {
            return Err(Error::Input("no rollouts to summarize".into()));
        }
        let n = costs.len() as f64;
        let mean = costs.iter().sum::<f64>() / n;
        let var = if costs.len() > 1 {
            costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std = var.sqrt();
        let half = 1.96 * std;
        Ok(Self { costs, mean, std, ci_low: mean - half, ci_high: mean + half })
    }
}

fn rollout(
    setup: &EvalSetup,
    pol: &GainPolicy,
    noise: &GaussianSampler,
    process: &GaussianSampler,
    init: &crate::dataset::InitSampler,
    horizon: usize,
    seed: u64,
) -> f64 {
    let mut rng = seeded(seed);
    let mut x = init.draw(&mut rng);
    clip_state(&mut x, &setup.limits);
    let mut total = 0.0;
    for _ in 0..horizon {
        let mut u = &pol.k * &x + noise.sample(&mut rng);
        clip_action(&mut u, &setup.limits);
        let w = process.sample(&mut rng);
        total += setup.cost.stage_cost(&x, &u);
        x = setup.step(&x, &u, &w);
        clip_state(&mut x, &setup.limits);
    }
    total
}

/// Runs `rollouts` independent episodes of u = Kx + z, z ~ N(0, W_z), with
/// clipping, and sums the stage costs of each.
///
/// Rollout r draws its initial state and all noise from stream (seed, r), so
/// policies evaluated with the same seed see common random numbers.
pub fn rollout_eval(
    setup: &EvalSetup,
    pol: &GainPolicy,
    rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<EvalReport> {
    let (n, m) = (setup.sys.n(), setup.sys.m());
    ensure_shape(&pol.k, m, n, "policy gain")?;
    ensure_shape(&pol.w_z, m, m, "W_z")?;
    if setup.env == EvalEnv::NonlinearPendulum && (n, m) != (2, 1) {
        return Err(Error::Dimension("the nonlinear pendulum has n = 2, m = 1".into()));
    }
    let noise = GaussianSampler::new(&pol.w_z)?;
    let process = GaussianSampler::new(&setup.sys.w_w)?;
    let init = setup.init.sampler(n)?;
    let costs: Vec<f64> = (0..rollouts)
        .into_par_iter()
        .map(|r| rollout(setup, pol, &noise, &process, &init, horizon, stream_seed(seed, r as u64)))
        .collect();
    if let Some(r) = costs.iter().position(|c| !c.is_finite()) {
        return Err(Error::Numerical(format!("rollout {r} produced a non-finite cost")));
    }
    EvalReport::from_costs(costs)
}
