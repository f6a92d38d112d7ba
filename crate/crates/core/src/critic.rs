//! Quadratic Q critic over state-action monomials: analytic construction from
//! the model and TD learning with a soft-updated target.
//!
//! With ξ = [x; u] the features are ξᵢξⱼ for i ≤ j in row-major upper-triangle
//! order, and `pack(S)` stores ½S_ii on the diagonal and S_ij off it, so that
//! wᵀφ = ½ξᵀSξ and Q_w(x, u) = wᵀφ − ĵ.

use std::path::Path;

use crate::bc::csv_err;
use crate::dataset::Transition;
use crate::error::{Error, Result};
use crate::lqr::{q_params, GainPolicy, LinearSystem, QParams, QuadraticCost};
use crate::matops::{ensure_square, Matrix, Vector};
use crate::rng::{seeded, GaussianSampler};

/// Version tag written next to serialized weights.
pub const FEATURE_ORDER: &str = "upper_triangle_row_major_v1";

/// (n+m)(n+m+1)/2
pub fn feature_dim(n: usize, m: usize) -> usize {
    let d = n + m;
    d * (d + 1) / 2
}

/// Side length d of the symmetric matrix packed into `len` weights.
fn side_from_len(len: usize) -> Option<usize> {
    let d = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (d * (d + 1) / 2 == len).then_some(d)
}

pub fn features(x: &Vector, u: &Vector) -> Vector {
    let xi: Vec<f64> = x.iter().chain(u.iter()).copied().collect();
    let d = xi.len();
    let mut phi = Vector::zeros(d * (d + 1) / 2);
    let mut k = 0;
    for i in 0..d {
        for j in i..d {
            phi[k] = xi[i] * xi[j];
            k += 1;
        }
    }
    phi
}

pub fn pack(s: &Matrix) -> Result<Vector> {
    let d = ensure_square(s, "S")?;
    let mut w = Vector::zeros(d * (d + 1) / 2);
    let mut k = 0;
    for i in 0..d {
        w[k] = 0.5 * s[(i, i)];
        k += 1;
        for j in i + 1..d {
            w[k] = 0.5 * (s[(i, j)] + s[(j, i)]);
            k += 1;
        }
    }
    Ok(w)
}

pub fn unpack(w: &Vector) -> Result<Matrix> {
    let d = side_from_len(w.len())
        .ok_or_else(|| Error::Dimension(format!("{} is not a triangular number", w.len())))?;
    let mut s = Matrix::zeros(d, d);
    let mut k = 0;
    for i in 0..d {
        s[(i, i)] = 2.0 * w[k];
        k += 1;
        for j in i + 1..d {
            s[(i, j)] = w[k];
            s[(j, i)] = w[k];
            k += 1;
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticWeights {
    pub w: Vector,
    pub j_hat: f64,
}

impl CriticWeights {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self { w: Vector::zeros(feature_dim(n, m)), j_hat: 0.0 }
    }

    /// Q_w(x, u) = wᵀφ(x, u) − ĵ
    pub fn q_value(&self, x: &Vector, u: &Vector) -> Result<f64> {
        let phi = features(x, u);
        if phi.len() != self.w.len() {
            return Err(Error::Dimension(format!(
                "critic has {} weights, features have {}",
                self.w.len(),
                phi.len()
            )));
        }
        Ok(self.w.dot(&phi) - self.j_hat)
    }

    /// Q-function blocks encoded by these weights.
    pub fn to_q_params(&self, n: usize) -> Result<QParams> {
        QParams::from_block(&unpack(&self.w)?, n, self.j_hat)
    }

    pub fn is_finite(&self) -> bool {
        self.j_hat.is_finite() && self.w.iter().all(|v| v.is_finite())
    }
}

/// Exact critic of the policy: packed Q-function blocks and J.
pub fn analytic_critic(sys: &LinearSystem, cost: &QuadraticCost, pol: &GainPolicy) -> Result<CriticWeights> {
    let qp = q_params(sys, cost, pol)?;
    Ok(CriticWeights { w: pack(&qp.block())?, j_hat: qp.j })
}

/// TD residual convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CriticLoss {
    /// δ = wᵀφ(x,u) − ½(c − ĵ) − w̄ᵀφ(x′,u′). The ½ matches the ½ in the
    /// quadratic form; the analytic critic is then an exact fixed point and ĵ
    /// is learned alongside w.
    Differential,
    /// δ = wᵀφ(x,u) + c − w̄ᵀφ(x′,u′), cost added as if it were a reward;
    /// ĵ is not updated.
    CostPlus,
}

impl std::str::FromStr for CriticLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "differential" => Ok(CriticLoss::Differential),
            "cost_plus" => Ok(CriticLoss::CostPlus),
            other => Err(Error::Input(format!("unknown critic loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for CriticLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CriticLoss::Differential => "differential",
            CriticLoss::CostPlus => "cost_plus",
        })
    }
}

/// One SGD step on mean δ² over `batch`. Successor actions u′ = Kx′ + z use
/// noise drawn from `seed` in batch order. Returns the updated critic and the
/// pre-step batch loss.
pub fn critic_td_step(
    critic: &CriticWeights,
    target: &CriticWeights,
    batch: &[Transition],
    pol: &GainPolicy,
    lr: f64,
    seed: u64,
    loss: CriticLoss,
) -> Result<(CriticWeights, f64)> {
    let sampler = GaussianSampler::new(&pol.w_z)?;
    td_step_with(critic, target, batch, pol, &sampler, lr, seed, loss)
}

#[allow(clippy::too_many_arguments)]
fn td_step_with(
    critic: &CriticWeights,
    target: &CriticWeights,
    batch: &[Transition],
    pol: &GainPolicy,
    sampler: &GaussianSampler,
    lr: f64,
    seed: u64,
    loss: CriticLoss,
) -> Result<(CriticWeights, f64)> {
    if batch.is_empty() {
        return Err(Error::Input("critic batch is empty".into()));
    }
    if critic.w.len() != target.w.len() {
        return Err(Error::Dimension("critic and target sizes differ".into()));
    }
    let (n, m) = (pol.k.ncols(), pol.k.nrows());
    if critic.w.len() != feature_dim(n, m) {
        return Err(Error::Dimension(format!(
            "critic has {} weights, policy implies {}",
            critic.w.len(),
            feature_dim(n, m)
        )));
    }
    let mut rng = seeded(seed);
    let mut grad_w = Vector::zeros(critic.w.len());
    let mut grad_j = 0.0;
    let mut total = 0.0;
    for tr in batch {
        if tr.x.len() != n || tr.u.len() != m || tr.x_next.len() != n {
            return Err(Error::Dimension("transition does not match policy dims".into()));
        }
        let u_next = &pol.k * &tr.x_next + sampler.sample(&mut rng);
        let phi = features(&tr.x, &tr.u);
        let next = target.w.dot(&features(&tr.x_next, &u_next));
        let delta = match loss {
            CriticLoss::Differential => critic.w.dot(&phi) - 0.5 * (tr.c - critic.j_hat) - next,
            CriticLoss::CostPlus => critic.w.dot(&phi) + tr.c - next,
        };
        total += delta * delta;
        grad_w.axpy(2.0 * delta, &phi, 1.0);
        grad_j += delta;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut out = critic.clone();
    out.w.axpy(-lr * scale, &grad_w, 1.0);
    if loss == CriticLoss::Differential {
        out.j_hat -= lr * scale * grad_j;
    }
    Ok((out, total * scale))
}

/// target ← (1−τ)·target + τ·critic, including ĵ.
pub fn soft_update(target: &CriticWeights, critic: &CriticWeights, tau: f64) -> Result<CriticWeights> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Input(format!("tau must be in [0, 1], got {tau}")));
    }
    if target.w.len() != critic.w.len() {
        return Err(Error::Dimension("critic and target sizes differ".into()));
    }
    Ok(CriticWeights {
        w: &target.w * (1.0 - tau) + &critic.w * tau,
        j_hat: (1.0 - tau) * target.j_hat + tau * critic.j_hat,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub tau: f64,
    /// Soft update after every `target_every` TD steps.
    pub target_every: usize,
    pub loss: CriticLoss,
    pub seed: u64,
}

impl Default for CriticTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 256,
            steps: 10_000,
            tau: 0.005,
            target_every: 10,
            loss: CriticLoss::Differential,
            seed: 0,
        }
    }
}

/// Critic and target carried between TD steps.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticState {
    pub critic: CriticWeights,
    pub target: CriticWeights,
    pub step: u64,
}

impl CriticState {
    pub fn new(init: CriticWeights) -> Self {
        Self { target: init.clone(), critic: init, step: 0 }
    }
}

/// Runs `steps` TD steps on minibatches drawn uniformly with replacement from
/// `data`, soft-updating the target on the configured cadence. Returns the
/// per-step batch losses.
pub fn train_critic(
    state: &mut CriticState,
    data: &[Transition],
    pol: &GainPolicy,
    cfg: &CriticTrainConfig,
    steps: usize,
) -> Result<Vec<f64>> {
    use rand::Rng;
    if data.is_empty() {
        return Err(Error::Input("critic training data is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.target_every == 0 {
        return Err(Error::Input("critic batch_size and target_every must be >= 1".into()));
    }
    let sampler = GaussianSampler::new(&pol.w_z)?;
    let mut trace = Vec::with_capacity(steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..steps {
        let step_seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(state.step);
        let mut rng = seeded(step_seed);
        batch.clear();
        batch.extend((0..cfg.batch_size).map(|_| data[rng.random_range(0..data.len())].clone()));
        let (next, loss) = td_step_with(
            &state.critic,
            &state.target,
            &batch,
            pol,
            &sampler,
            cfg.lr,
            rng.random(),
            cfg.loss,
        )?;
        if !next.is_finite() || !loss.is_finite() {
            return Err(Error::Training { epoch: state.step as usize, loss });
        }
        state.critic = next;
        state.step += 1;
        if state.step % cfg.target_every as u64 == 0 {
            state.target = soft_update(&state.target, &state.critic, cfg.tau)?;
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Rows: feature-order tag, dims, ĵ, weights.
pub fn save_critic(c: &CriticWeights, n: usize, m: usize, path: &Path) -> Result<()> {
    if c.w.len() != feature_dim(n, m) {
        return Err(Error::Dimension("critic size does not match n, m".into()));
    }
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(|e| csv_err(path, e))?;
    let rows: Vec<Vec<String>> = vec![
        vec!["feature_order".into(), FEATURE_ORDER.into()],
        vec!["n".into(), n.to_string(), "m".into(), m.to_string()],
        vec!["j_hat".into(), format!("{:.16e}", c.j_hat)],
        std::iter::once("w".to_string()).chain(c.w.iter().map(|v| format!("{v:.16e}"))).collect(),
    ];
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_critic(path: &Path) -> Result<(CriticWeights, usize, usize)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let rows = reader.records().collect::<std::result::Result<Vec<_>, _>>().map_err(|e| csv_err(path, e))?;
    let perr = |line: u64, msg: &str| Error::Parse { path: path.to_path_buf(), line, msg: msg.to_string() };
    if rows.len() != 4 {
        return Err(perr(rows.len() as u64, "critic file needs exactly 4 rows"));
    }
    if rows[0].get(1) != Some(FEATURE_ORDER) {
        return Err(perr(1, "unsupported feature ordering"));
    }
    let dims = &rows[1];
    let (n, m) = match (dims.get(1).map(str::parse::<usize>), dims.get(3).map(str::parse::<usize>)) {
        (Some(Ok(n)), Some(Ok(m))) => (n, m),
        _ => return Err(perr(2, "bad dims row")),
    };
    let j_hat = rows[2].get(1).and_then(|s| s.parse().ok()).ok_or_else(|| perr(3, "bad j_hat"))?;
    let w = rows[3]
        .iter()
        .skip(1)
        .map(|s| s.parse::<f64>().map_err(|_| perr(4, "bad weight")))
        .collect::<Result<Vec<_>>>()?;
    if w.len() != feature_dim(n, m) {
        return Err(perr(4, "weight count does not match dims"));
    }
    Ok((CriticWeights { w: Vector::from_vec(w), j_hat }, n, m))
}
