//! One-step policy training over the gain K: the BC-regularized frozen-critic
//! surrogate, its closed-form gradient and curvature constants, the regularized
//! optimum K*, and the gradient-descent loop that records a theory certificate.
//!
//! With H = S̄_uu + αI the surrogate is exactly quadratic in K:
//! l(K) − l(K*) = ½Tr((K−K*)ᵀH(K−K*)Σ_D) and ∇l(K) = H(K−K*)Σ_D.

mod certificate;

pub use certificate::{
    load_certificate_header, save_certificate, verify_certificate, Audit, AuditReport, TheoryCertificate,
    TraceRow,
};

use std::fmt;
use std::str::FromStr;

use crate::bc::BehaviorPolicy;
use crate::critic::{train_critic, CriticState, CriticTrainConfig, CriticWeights};
use crate::dataset::{bc_cross_moment, dataset_moments, CrossMoment, Dataset, Moments};
use crate::error::{Error, Result};
use crate::lqr::{q_params, GainPolicy, LinearSystem, QParams, QuadraticCost};
use crate::matops::{
    ensure_shape, frobenius, inverse, lambda_min, spectral_norm, symmetrize, trace_of_product, Matrix,
};

/// λ_min(Σ_D) below this makes the dominance constant undefined.
pub const SIGMA_FLOOR: f64 = 1e-10;

/// The one-step loss with the Q-function blocks held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenSurrogate {
    pub qp: QParams,
    pub moments: Moments,
    /// E[μ_b(x, z) xᵀ]
    pub c_b: Matrix,
    /// E‖μ_b(x, z) − z‖²; constant in K
    pub beta_b: f64,
    pub k_b: Option<Matrix>,
    pub alpha: f64,
    pub w_z: Matrix,
}

impl FrozenSurrogate {
    pub fn new(
        qp: QParams,
        moments: Moments,
        cross: CrossMoment,
        k_b: Option<Matrix>,
        alpha: f64,
        w_z: Matrix,
    ) -> Result<Self> {
        let (n, m) = (qp.n(), qp.m());
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Input(format!("alpha must be > 0, got {alpha}")));
        }
        ensure_shape(&qp.s_ux, m, n, "S_ux")?;
        ensure_shape(&moments.sigma_d, n, n, "Σ_D")?;
        ensure_shape(&cross.c_b, m, n, "C_b")?;
        ensure_shape(&w_z, m, m, "W_z")?;
        if let Some(k_b) = &k_b {
            ensure_shape(k_b, m, n, "K_b")?;
        }
        let lmin = lambda_min(&moments.sigma_d);
        if lmin < SIGMA_FLOOR {
            return Err(Error::MomentDegeneracy { lambda_min: lmin });
        }
        let s = Self { qp, moments, c_b: cross.c_b, beta_b: cross.beta_b, k_b, alpha, w_z };
        let h_min = lambda_min(&s.curvature());
        if h_min <= 0.0 {
            return Err(Error::Singular(format!("S_uu + αI is not positive definite (λ_min = {h_min:e})")));
        }
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.qp.n()
    }

    pub fn m(&self) -> usize {
        self.qp.m()
    }

    /// H = S̄_uu + αI
    pub fn curvature(&self) -> Matrix {
        symmetrize(&(&self.qp.s_uu + Matrix::identity(self.m(), self.m()) * self.alpha))
    }

    fn check_gain(&self, k: &Matrix) -> Result<()> {
        ensure_shape(k, self.m(), self.n(), "K")
    }
}

/// E[Q̄(x, Kx+z)] + (α/2)E‖Kx + z − μ_b(x, z)‖² in closed form.
pub fn surrogate_loss(k: &Matrix, s: &FrozenSurrogate) -> Result<f64> {
    s.check_gain(k)?;
    let sigma = &s.moments.sigma_d;
    let qp = &s.qp;
    let kt = k.transpose();
    let q_part = 0.5 * trace_of_product(&qp.s_xx, sigma)
        + trace_of_product(&(&kt * &qp.s_ux), sigma)
        + 0.5 * trace_of_product(&(&kt * &qp.s_uu * k), sigma)
        + 0.5 * trace_of_product(&qp.s_uu, &s.w_z)
        - qp.j;
    let bc_part = trace_of_product(&(&kt * k), sigma) - 2.0 * trace_of_product(&kt, &s.c_b) + s.beta_b;
    Ok(q_part + 0.5 * s.alpha * bc_part)
}

/// ∇l(K) = (S̄_ux + S̄_uuK)Σ_D + α(KΣ_D − C_b).
pub fn loss_gradient(k: &Matrix, s: &FrozenSurrogate) -> Result<Matrix> {
    s.check_gain(k)?;
    let sigma = &s.moments.sigma_d;
    Ok((&s.qp.s_ux + &s.qp.s_uu * k) * sigma + (k * sigma - &s.c_b) * s.alpha)
}

/// The same gradient written as H(K − K*)Σ_D.
pub fn loss_gradient_centered(k: &Matrix, k_star: &Matrix, s: &FrozenSurrogate) -> Result<Matrix> {
    s.check_gain(k)?;
    Ok(s.curvature() * (k - k_star) * &s.moments.sigma_d)
}

/// l(K) − l(K*) = ½Tr((K−K*)ᵀH(K−K*)Σ_D), free of the cancellation in a
/// difference of losses.
pub fn loss_gap(k: &Matrix, k_star: &Matrix, s: &FrozenSurrogate) -> Result<f64> {
    s.check_gain(k)?;
    let d = k - k_star;
    Ok(0.5 * trace_of_product(&(d.transpose() * s.curvature() * &d), &s.moments.sigma_d))
}

/// Central differences (f(K+hE_ij) − f(K−hE_ij))/2h for every entry.
pub fn finite_diff_gradient(f: impl Fn(&Matrix) -> f64, k: &Matrix, h: f64) -> Matrix {
    let mut g = Matrix::zeros(k.nrows(), k.ncols());
    let mut probe = k.clone();
    for i in 0..k.nrows() {
        for j in 0..k.ncols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe);
            probe[(i, j)] = orig - h;
            let down = f(&probe);
            probe[(i, j)] = orig;
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// L = ‖S̄_uu + αI‖₂ ‖Σ_D‖₂.
pub fn smoothness_constant(s: &FrozenSurrogate) -> f64 {
    spectral_norm(&s.curvature()) * spectral_norm(&s.moments.sigma_d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DominanceConstants {
    /// 1 / (2‖H⁻¹‖_F² ‖Σ_D⁻¹‖_F² ‖R_u + (α/2)I‖_F)
    pub mu_paper: f64,
    /// λ_min(Σ_D)·λ_min(H), the exact PL constant of the quadratic
    pub mu_exact: f64,
}

pub fn dominance_constant(s: &FrozenSurrogate, r_u: &Matrix) -> Result<DominanceConstants> {
    ensure_shape(r_u, s.m(), s.m(), "R_u")?;
    let sigma = &s.moments.sigma_d;
    let lmin = lambda_min(sigma);
    if lmin < SIGMA_FLOOR {
        return Err(Error::MomentDegeneracy { lambda_min: lmin });
    }
    let h = s.curvature();
    let h_inv = inverse(&h, "S_uu + αI")?;
    let sigma_inv = inverse(sigma, "Σ_D")?;
    let ru_half = r_u + Matrix::identity(s.m(), s.m()) * (0.5 * s.alpha);
    let mu_paper =
        1.0 / (2.0 * frobenius(&h_inv).powi(2) * frobenius(&sigma_inv).powi(2) * frobenius(&ru_half));
    Ok(DominanceConstants { mu_paper, mu_exact: lmin * lambda_min(&h) })
}

/// K* = H⁻¹(αC_bΣ_D⁻¹ − S̄_ux), the zero of the gradient.
pub fn optimal_regularized_gain(s: &FrozenSurrogate) -> Result<Matrix> {
    let h_inv = inverse(&s.curvature(), "S_uu + αI")?;
    let sigma_inv = inverse(&s.moments.sigma_d, "Σ_D")?;
    Ok(h_inv * (&s.c_b * sigma_inv * s.alpha - &s.qp.s_ux))
}

/// K − η·∇
pub fn gd_step(k: &Matrix, grad: &Matrix, eta: f64) -> Matrix {
    k - grad * eta
}

/// 1 − 2ημ + η²Lμ, clamped at 0 (it can only dip below through roundoff).
pub fn rate_factor(eta: f64, l: f64, mu: f64) -> f64 {
    (1.0 - 2.0 * eta * mu + eta * eta * l * mu).max(0.0)
}

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq)]
        pub enum $name { $($variant),+ }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($name)
                    ))),
                }
            }
        }
    };
}

string_enum!(CriticMode { Analytic => "analytic", Learned => "learned" });
string_enum!(SMode { Frozen => "frozen", Reevaluated => "reevaluated" });
string_enum!(BcKind { Linear => "linear", Flow => "flow" });

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    /// η = 1/L
    Auto,
    /// η = c/L, written `c/L`.
    InverseL(f64),
    Fixed(f64),
}

impl fmt::Display for StepSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepSize::Auto => f.write_str("auto"),
            StepSize::InverseL(c) => write!(f, "{c}/L"),
            StepSize::Fixed(e) => write!(f, "{e}"),
        }
    }
}

impl FromStr for StepSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("eta must be `auto`, `c/L` or a number, got `{s}`"));
        if s == "auto" {
            return Ok(StepSize::Auto);
        }
        if let Some(c) = s.strip_suffix("/L") {
            return c.trim().parse::<f64>().map(StepSize::InverseL).map_err(|_| bad());
        }
        s.parse::<f64>().map(StepSize::Fixed).map_err(|_| bad())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub eta: StepSize,
    pub iterations: usize,
    pub critic_mode: CriticMode,
    pub s_mode: SMode,
    /// Consumed by the pipeline when it builds the BC policy.
    pub bc_kind: BcKind,
    pub w_z: Matrix,
    pub seed: u64,
    /// Noise draws per state when C_b needs Monte Carlo.
    pub cross_moment_samples: usize,
    pub critic: CriticTrainConfig,
    /// TD steps on the initial policy before the first snapshot (learned mode).
    pub critic_pretrain_steps: usize,
    /// TD steps between gain updates (learned, reevaluated mode).
    pub critic_steps_per_iter: usize,
}

impl TrainerConfig {
    pub fn new(m: usize) -> Self {
        Self {
            alpha: 0.1,
            eta: StepSize::Auto,
            iterations: 500,
            critic_mode: CriticMode::Analytic,
            s_mode: SMode::Frozen,
            bc_kind: BcKind::Linear,
            w_z: Matrix::identity(m, m) * 0.01,
            seed: 0,
            cross_moment_samples: 8,
            critic: CriticTrainConfig::default(),
            critic_pretrain_steps: 10_000,
            critic_steps_per_iter: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub k_final: Matrix,
    pub trace: Vec<TraceRow>,
    pub certificate: TheoryCertificate,
    /// Surrogate at K⁰ (the frozen one in frozen mode).
    pub surrogate: FrozenSurrogate,
    pub critic: Option<CriticWeights>,
}

const K_STAR_TOL: f64 = 1e-10;
const K_STAR_MAX_SWEEPS: usize = 1000;

/// Fixed point of K ← H(K)⁻¹(αC_bΣ_D⁻¹ − S_ux(K)) with S re-evaluated at K.
fn coupled_optimum(
    k0: &Matrix,
    mut surrogate_at: impl FnMut(&Matrix) -> Result<FrozenSurrogate>,
) -> Result<Matrix> {
    let mut k = k0.clone();
    for _ in 0..K_STAR_MAX_SWEEPS {
        let s = surrogate_at(&k)
            .map_err(|e| Error::NoSolution(format!("K* fixed point left the feasible set: {e}")))?;
        let next = optimal_regularized_gain(&s)?;
        let step = (&next - &k).norm();
        k = next;
        if step < K_STAR_TOL {
            return Ok(k);
        }
    }
    Err(Error::NoSolution(format!("K* fixed point not converged after {K_STAR_MAX_SWEEPS} sweeps")))
}

/// Gradient descent on the one-step loss from K⁰, recording loss, gap to K*,
/// ‖∇‖_F and ρ(A+BK) per iteration and auditing the run.
///
/// Frozen mode holds the Q-blocks at their K⁰ values (analytic or the learned
/// critic snapshot), which makes the loss exactly quadratic. Reevaluated mode
/// recomputes them at every iterate. `sys` is required for the analytic
/// critic; when present it also supplies the spectral radii, and an iterate
/// with ρ ≥ 1 aborts training with the iteration index.
pub fn train_one_step_policy(
    cfg: &TrainerConfig,
    ds: &Dataset,
    bc: &dyn BehaviorPolicy,
    sys: Option<&LinearSystem>,
    cost: &QuadraticCost,
    k0: &Matrix,
) -> Result<TrainOutput> {
    let (n, m) = (ds.n, ds.m);
    ensure_shape(k0, m, n, "K0")?;
    ensure_shape(&cfg.w_z, m, m, "W_z")?;
    let moments = dataset_moments(ds)?;
    let lmin = lambda_min(&moments.sigma_d);
    if lmin < SIGMA_FLOOR {
        return Err(Error::MomentDegeneracy { lambda_min: lmin });
    }
    let cross = bc_cross_moment(ds, bc, cfg.cross_moment_samples, cfg.seed)?;
    let k_b = bc.linear_gain().cloned();
    if let Some(sys) = sys {
        sys.stable_closed_loop(k0, "initial gain K0")?;
    }
    if cfg.critic_mode == CriticMode::Analytic && sys.is_none() {
        return Err(Error::Config("analytic critic mode needs the system model".into()));
    }

    let build = |qp: QParams| {
        FrozenSurrogate::new(qp, moments.clone(), cross.clone(), k_b.clone(), cfg.alpha, cfg.w_z.clone())
    };
    let analytic_at = |k: &Matrix| -> Result<FrozenSurrogate> {
        let sys = sys.expect("checked above");
        build(q_params(sys, cost, &GainPolicy::new(k.clone(), cfg.w_z.clone())?)?)
    };
    let mut critic = match cfg.critic_mode {
        CriticMode::Analytic => None,
        CriticMode::Learned => {
            let mut state = CriticState::new(CriticWeights::zeros(n, m));
            let pol = GainPolicy::new(k0.clone(), cfg.w_z.clone())?;
            train_critic(&mut state, &ds.transitions, &pol, &cfg.critic, cfg.critic_pretrain_steps)?;
            Some(state)
        }
    };
    let learned_surrogate = |state: &CriticState| build(state.critic.to_q_params(n)?);

    let s0 = match &critic {
        None => analytic_at(k0)?,
        Some(state) => learned_surrogate(state)?,
    };
    let l0 = smoothness_constant(&s0);
    let eta = match cfg.eta {
        StepSize::Auto => 1.0 / l0,
        requested => {
            let e = match requested {
                StepSize::InverseL(c) => c / l0,
                StepSize::Fixed(e) => e,
                StepSize::Auto => unreachable!(),
            };
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config(format!("eta must be > 0, got {e}")));
            }
            if e >= 2.0 / l0 {
                return Err(Error::StepSize { eta: e, limit: 2.0 / l0 });
            }
            e
        }
    };
    let dom = dominance_constant(&s0, &cost.r_u)?;

    // K* is known up front except for a re-learned critic.
    let mut k_star = match (cfg.s_mode, &critic) {
        (SMode::Frozen, _) => Some(optimal_regularized_gain(&s0)?),
        (SMode::Reevaluated, None) => Some(coupled_optimum(k0, analytic_at)?),
        (SMode::Reevaluated, Some(_)) => None,
    };

    struct Step {
        k: Matrix,
        /// Minimizer of the surrogate used at this step.
        k_min: Matrix,
        loss: f64,
        grad_fro: f64,
        rho: Option<f64>,
        surrogate: Option<FrozenSurrogate>,
    }
    let mut steps: Vec<Step> = Vec::with_capacity(cfg.iterations + 1);
    let mut k = k0.clone();
    for t in 0..=cfg.iterations {
        let rho = match sys {
            Some(sys) => {
                let rho = sys.closed_loop_radius(&k)?;
                if rho >= 1.0 {
                    return Err(Error::Instability {
                        rho,
                        context: format!("gain iterate at iteration {t}"),
                    });
                }
                Some(rho)
            }
            None => None,
        };
        let s_t = match (cfg.s_mode, critic.as_mut()) {
            (SMode::Frozen, _) => None,
            (SMode::Reevaluated, None) => Some(analytic_at(&k)?),
            (SMode::Reevaluated, Some(state)) => {
                if t > 0 {
                    let pol = GainPolicy::new(k.clone(), cfg.w_z.clone())?;
                    train_critic(state, &ds.transitions, &pol, &cfg.critic, cfg.critic_steps_per_iter)?;
                }
                Some(learned_surrogate(state)?)
            }
        };
        let s = s_t.as_ref().unwrap_or(&s0);
        let loss = surrogate_loss(&k, s)?;
        let grad = loss_gradient(&k, s)?;
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss or gradient at iteration {t}")));
        }
        let next = (t < cfg.iterations).then(|| gd_step(&k, &grad, eta));
        // Recorded quantities are measured from the minimizer of the current
        // quadratic surrogate, which avoids the cancellation of the raw
        // gradient formula near convergence.
        let k_min = optimal_regularized_gain(s)?;
        steps.push(Step {
            grad_fro: frobenius(&loss_gradient_centered(&k, &k_min, s)?),
            k: k.clone(),
            k_min,
            loss,
            rho,
            surrogate: s_t,
        });
        if let Some(next) = next {
            k = next;
        }
    }
    if k_star.is_none() {
        let last = steps.last().and_then(|s| s.surrogate.as_ref()).unwrap_or(&s0);
        k_star = Some(optimal_regularized_gain(last)?);
    }
    let k_star = k_star.expect("set above");

    let mut trace = Vec::with_capacity(steps.len());
    let rf = rate_factor(eta, l0, dom.mu_exact);
    let mut gap0 = 0.0;
    for (t, st) in steps.iter().enumerate() {
        let s = st.surrogate.as_ref().unwrap_or(&s0);
        // l(K) − l(K*) as a difference of gaps to the surrogate's minimizer;
        // the second term vanishes in frozen mode.
        let gap = loss_gap(&st.k, &st.k_min, s)? - loss_gap(&k_star, &st.k_min, s)?;
        if t == 0 {
            gap0 = gap;
        }
        trace.push(TraceRow {
            iter: t,
            loss: st.loss,
            gap,
            grad_fro: st.grad_fro,
            rho: st.rho,
            rate_bound: rf.powi(t as i32) * gap0,
            k_dist: frobenius(&(&st.k - &k_star)),
        });
    }
    let scale = frobenius(k0).max(frobenius(&k_star)).max(1.0);

    let mut certificate = TheoryCertificate {
        l: l0,
        mu_paper: dom.mu_paper,
        mu_exact: dom.mu_exact,
        eta,
        alpha: cfg.alpha,
        k_star,
        rate_factor: rf,
        gap_floor: certificate::gap_floor(l0, dom.mu_exact, scale),
        s_mode: cfg.s_mode,
        audits: AuditReport::default(),
    };
    certificate.audits = verify_certificate(&trace, &certificate);
    Ok(TrainOutput { k_final: k, trace, certificate, surrogate: s0, critic: critic.map(|s| s.critic) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bc::LinearBCModel;
    use crate::dataset::Transition;
    use crate::matops::Vector;
    use crate::rng::{seeded, standard_normal};
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use rand::Rng;

    /// The documented scalar instance: S̄_uu=7/3, S̄_ux=2/3, S̄_xx=4/3, Σ_D=2,
    /// α=0.1, K_b=−0.4, W_z=0, J̄=0.
    pub(crate) fn scalar_instance() -> FrozenSurrogate {
        let qp = QParams {
            s_xx: dmatrix![4.0 / 3.0],
            s_ux: dmatrix![2.0 / 3.0],
            s_uu: dmatrix![7.0 / 3.0],
            j: 0.0,
        };
        let moments = Moments { sigma_d: dmatrix![2.0], mean_x: Vector::zeros(1), count: 1 };
        let k_b = dmatrix![-0.4];
        let cross = CrossMoment { c_b: &k_b * 2.0, beta_b: 0.16 * 2.0 };
        FrozenSurrogate::new(qp, moments, cross, Some(k_b), 0.1, dmatrix![0.0]).unwrap()
    }

    fn random_spd(d: usize, rng: &mut impl Rng, floor: f64) -> Matrix {
        let a = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + Matrix::identity(d, d) * floor
    }

    pub(crate) fn random_instance(rng: &mut impl Rng) -> FrozenSurrogate {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let block = random_spd(n + m, rng, 0.1);
        let qp = QParams::from_block(&block, n, rng.random_range(0.0..2.0)).unwrap();
        let sigma = random_spd(n, rng, 0.2);
        let k_b = Matrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let cross = CrossMoment { c_b: &k_b * &sigma, beta_b: (k_b.transpose() * &k_b * &sigma).trace() };
        let moments = Moments { sigma_d: sigma, mean_x: Vector::zeros(n), count: 100 };
        let w_z = random_spd(m, rng, 0.0) * 0.1;
        FrozenSurrogate::new(qp, moments, cross, Some(k_b), rng.random_range(0.01..1.0), w_z).unwrap()
    }

    #[test]
    fn scalar_loss_gradient_and_constants() {
        let s = scalar_instance();
        let zero = dmatrix![0.0];
        assert_abs_diff_eq!(surrogate_loss(&zero, &s).unwrap(), 4.0 / 3.0 + 0.016, epsilon = 1e-14);
        let g = loss_gradient(&zero, &s).unwrap()[(0, 0)];
        assert_abs_diff_eq!(g, 4.0 / 3.0 + 0.08, epsilon = 1e-14);
        let fd = finite_diff_gradient(|k| surrogate_loss(k, &s).unwrap(), &zero, 1e-6)[(0, 0)];
        assert!((fd - g).abs() < 1e-7 * g.abs());
        assert_abs_diff_eq!(smoothness_constant(&s), 73.0 / 15.0, epsilon = 1e-13);
        let dom = dominance_constant(&s, &dmatrix![1.0]).unwrap();
        let h = 7.0 / 3.0 + 0.1;
        assert_abs_diff_eq!(dom.mu_paper, 1.0 / (2.0 / (h * h) * 0.25 * 1.05), epsilon = 1e-12);
        assert!((dom.mu_paper - 11.278).abs() < 1e-3);
        assert_abs_diff_eq!(dom.mu_exact, 2.0 * h, epsilon = 1e-13);
        let k_star = optimal_regularized_gain(&s).unwrap();
        assert!((k_star[(0, 0)] + 0.29041).abs() < 1e-5);
        assert!(loss_gradient(&k_star, &s).unwrap().norm() < 1e-10);
    }

    #[test]
    fn perfect_cloning_zeroes_the_bc_term() {
        let s = scalar_instance();
        let k_b = s.k_b.clone().unwrap();
        let loss = surrogate_loss(&k_b, &s).unwrap();
        let kk = k_b[(0, 0)];
        let q_only = 0.5 * (4.0 / 3.0) * 2.0 + kk * (2.0 / 3.0) * 2.0 + 0.5 * kk * kk * (7.0 / 3.0) * 2.0;
        assert_abs_diff_eq!(loss, q_only, epsilon = 1e-14);
    }

    #[test]
    fn gap_identity_and_gradient_forms() {
        let mut rng = seeded(10);
        for _ in 0..50 {
            let s = random_instance(&mut rng);
            let k_star = optimal_regularized_gain(&s).unwrap();
            let l_star = surrogate_loss(&k_star, &s).unwrap();
            let k = Matrix::from_fn(s.m(), s.n(), |_, _| rng.random_range(-2.0..2.0));
            let diff = surrogate_loss(&k, &s).unwrap() - l_star;
            let gap = loss_gap(&k, &k_star, &s).unwrap();
            assert!((diff - gap).abs() <= 1e-9 * (1.0 + gap.abs()), "{diff} vs {gap}");
            let g1 = loss_gradient(&k, &s).unwrap();
            let g2 = loss_gradient_centered(&k, &k_star, &s).unwrap();
            assert!((&g1 - &g2).norm() <= 1e-10 * (1.0 + g1.norm()));
        }
    }

    #[test]
    fn finite_difference_examples() {
        let k = Matrix::identity(2, 2);
        let g = finite_diff_gradient(|k| (k.transpose() * k).trace(), &k, 1e-6);
        assert!((g - Matrix::identity(2, 2) * 2.0).norm() < 1e-8);
        assert_eq!(finite_diff_gradient(|_| 3.5, &k, 1e-6), Matrix::zeros(2, 2));
    }

    #[test]
    fn regularized_optimum_limits() {
        let mut s = scalar_instance();
        s.alpha = 1e6;
        let k_star = optimal_regularized_gain(&s).unwrap();
        assert!((k_star[(0, 0)] + 0.4).abs() < 1e-4);

        let mut s = scalar_instance();
        s.qp.s_ux = dmatrix![0.0];
        s.c_b = dmatrix![0.0];
        assert_eq!(optimal_regularized_gain(&s).unwrap(), dmatrix![0.0]);
    }

    #[test]
    fn smoothness_at_identity_moments() {
        let qp = QParams { s_xx: dmatrix![1.0], s_ux: dmatrix![0.0], s_uu: dmatrix![1.0], j: 0.0 };
        let moments = Moments { sigma_d: dmatrix![1.0], mean_x: Vector::zeros(1), count: 1 };
        let cross = CrossMoment { c_b: dmatrix![0.0], beta_b: 0.0 };
        let s = FrozenSurrogate::new(qp, moments, cross, None, 1e-12, dmatrix![0.0]).unwrap();
        assert_abs_diff_eq!(smoothness_constant(&s), 1.0, epsilon = 1e-11);
    }

    #[test]
    fn degenerate_moments_are_refused() {
        let qp =
            QParams { s_xx: Matrix::identity(2, 2), s_ux: dmatrix![0.0, 0.0], s_uu: dmatrix![1.0], j: 0.0 };
        let moments = Moments { sigma_d: dmatrix![1.0, 0.0; 0.0, 0.0], mean_x: Vector::zeros(2), count: 1 };
        let cross = CrossMoment { c_b: dmatrix![0.0, 0.0], beta_b: 0.0 };
        let r = FrozenSurrogate::new(qp, moments, cross, None, 0.1, dmatrix![0.0]);
        assert!(matches!(r, Err(Error::MomentDegeneracy { .. })));
    }

    #[test]
    fn gd_step_examples() {
        let k = dmatrix![0.0];
        assert_eq!(gd_step(&k, &dmatrix![1.41333], 0.0), k);
        assert_abs_diff_eq!(gd_step(&k, &dmatrix![1.41333], 0.1)[(0, 0)], -0.141333, epsilon = 1e-15);
        let s = scalar_instance();
        let eta = 1.0 / smoothness_constant(&s);
        let k1 = gd_step(&k, &loss_gradient(&k, &s).unwrap(), eta);
        let k_star = optimal_regularized_gain(&s).unwrap();
        assert!((k1 - k_star).norm() < 1e-12);
    }

    #[test]
    fn step_size_parsing() {
        assert_eq!("auto".parse::<StepSize>().unwrap(), StepSize::Auto);
        assert_eq!("0.5".parse::<StepSize>().unwrap(), StepSize::Fixed(0.5));
        assert_eq!("10/L".parse::<StepSize>().unwrap(), StepSize::InverseL(10.0));
        assert!("x/L".parse::<StepSize>().is_err());
        assert!("fast".parse::<StepSize>().is_err());
        assert_eq!("reevaluated".parse::<SMode>().unwrap(), SMode::Reevaluated);
        assert!("nope".parse::<CriticMode>().is_err());
    }

    fn scalar_dataset(len: usize) -> Dataset {
        let mut rng = seeded(1);
        let transitions = (0..len)
            .map(|_| {
                let x = standard_normal(&mut rng, 1) * 2f64.sqrt();
                let u = &x * -0.4;
                Transition { x_next: &x * 0.5 + &u, c: 0.0, x, u }
            })
            .collect();
        Dataset::new(1, 1, 0, "scalar", transitions).unwrap()
    }

    fn scalar_setup() -> (LinearSystem, QuadraticCost) {
        (
            LinearSystem::new(dmatrix![0.5], dmatrix![1.0], dmatrix![1.0]).unwrap(),
            QuadraticCost::new(dmatrix![1.0], dmatrix![1.0]).unwrap(),
        )
    }

    #[test]
    fn frozen_scalar_run_converges_in_one_step() {
        let (sys, cost) = scalar_setup();
        let ds = scalar_dataset(500);
        let bc = crate::bc::fit_linear_bc(&ds).unwrap();
        let mut cfg = TrainerConfig::new(1);
        cfg.iterations = 20;
        cfg.w_z = dmatrix![0.0];
        let out = train_one_step_policy(&cfg, &ds, &bc, Some(&sys), &cost, &dmatrix![0.0]).unwrap();
        assert!(out.certificate.rate_factor.abs() < 1e-12);
        assert!(out.trace[1].k_dist < 1e-12, "{}", out.trace[1].k_dist);
        assert!(out.certificate.audits.all_pass(), "{:?}", out.certificate.audits);
    }

    #[test]
    fn starting_at_the_optimum_stays_there() {
        // The coupled optimum is a K⁰ whose own frozen optimum is itself.
        let (sys, cost) = scalar_setup();
        let ds = scalar_dataset(500);
        let bc = LinearBCModel { k_b: dmatrix![-0.4] };
        let mut cfg = TrainerConfig::new(1);
        cfg.iterations = 0;
        cfg.s_mode = SMode::Reevaluated;
        let k_star = train_one_step_policy(&cfg, &ds, &bc, Some(&sys), &cost, &dmatrix![0.0])
            .unwrap()
            .certificate
            .k_star;
        cfg.s_mode = SMode::Frozen;
        cfg.iterations = 10;
        let out = train_one_step_policy(&cfg, &ds, &bc, Some(&sys), &cost, &k_star).unwrap();
        for row in &out.trace {
            assert!(row.grad_fro < 1e-9 && row.gap < 1e-18, "{row:?}");
        }
        assert!(out.certificate.audits.all_pass());
    }

    #[test]
    fn oversized_step_is_refused() {
        let (sys, cost) = scalar_setup();
        let ds = scalar_dataset(100);
        let bc = LinearBCModel { k_b: dmatrix![-0.4] };
        let mut cfg = TrainerConfig::new(1);
        let l = {
            let probe = train_one_step_policy(
                &{
                    let mut c = cfg.clone();
                    c.iterations = 0;
                    c
                },
                &ds,
                &bc,
                Some(&sys),
                &cost,
                &dmatrix![0.0],
            )
            .unwrap();
            probe.certificate.l
        };
        cfg.eta = StepSize::Fixed(10.0 / l);
        assert!(matches!(
            train_one_step_policy(&cfg, &ds, &bc, Some(&sys), &cost, &dmatrix![0.0]),
            Err(Error::StepSize { .. })
        ));
    }

    #[test]
    fn unstable_initial_gain_is_refused() {
        let (sys, cost) = scalar_setup();
        let ds = scalar_dataset(100);
        let bc = LinearBCModel { k_b: dmatrix![-0.4] };
        let cfg = TrainerConfig::new(1);
        let r = train_one_step_policy(&cfg, &ds, &bc, Some(&sys), &cost, &dmatrix![1.0]);
        assert!(matches!(r, Err(Error::Instability { .. })));
    }

    #[test]
    fn analytic_mode_requires_the_model() {
        let (_, cost) = scalar_setup();
        let ds = scalar_dataset(100);
        let bc = LinearBCModel { k_b: dmatrix![-0.4] };
        let r = train_one_step_policy(&TrainerConfig::new(1), &ds, &bc, None, &cost, &dmatrix![0.0]);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn reevaluated_analytic_mode_converges_to_coupled_optimum() {
        let (sys, cost) = scalar_setup();
        let ds = scalar_dataset(500);
        let bc = LinearBCModel { k_b: dmatrix![-0.4] };
        let mut cfg = TrainerConfig::new(1);
        cfg.s_mode = SMode::Reevaluated;
        cfg.iterations = 200;
        let out = train_one_step_policy(&cfg, &ds, &bc, Some(&sys), &cost, &dmatrix![0.0]).unwrap();
        let k_star = &out.certificate.k_star;
        // K* is a fixed point of the coupled optimality condition
        let s = FrozenSurrogate::new(
            q_params(&sys, &cost, &GainPolicy::new(k_star.clone(), cfg.w_z.clone()).unwrap()).unwrap(),
            dataset_moments(&ds).unwrap(),
            bc_cross_moment(&ds, &bc, 1, 0).unwrap(),
            None,
            cfg.alpha,
            cfg.w_z.clone(),
        )
        .unwrap();
        assert!((optimal_regularized_gain(&s).unwrap() - k_star).norm() < 1e-9);
        assert!(out.trace.last().unwrap().k_dist < 1e-8);
    }

    #[test]
    fn learned_critic_mode_runs_without_the_model() {
        let (_, cost) = scalar_setup();
        let sys = LinearSystem::new(dmatrix![0.5], dmatrix![1.0], dmatrix![0.01]).unwrap();
        let mut rng = seeded(4);
        let transitions = (0..4000)
            .map(|_| {
                let x = standard_normal(&mut rng, 1);
                let u = standard_normal(&mut rng, 1);
                let x_next = sys.step(&x, &u, &(standard_normal(&mut rng, 1) * 0.1));
                Transition { c: cost.stage_cost(&x, &u), x, u, x_next }
            })
            .collect();
        let ds = Dataset::new(1, 1, 0, "scalar", transitions).unwrap();
        let bc = crate::bc::fit_linear_bc(&ds).unwrap();
        let mut cfg = TrainerConfig::new(1);
        cfg.critic_mode = CriticMode::Learned;
        cfg.iterations = 50;
        cfg.critic =
            CriticTrainConfig { lr: 0.005, batch_size: 64, tau: 0.05, target_every: 1, ..Default::default() };
        cfg.critic_pretrain_steps = 20_000;
        let out = train_one_step_policy(&cfg, &ds, &bc, None, &cost, &dmatrix![0.0]).unwrap();
        assert!(out.trace.iter().all(|r| r.rho.is_none()));
        let analytic = crate::critic::analytic_critic(
            &sys,
            &cost,
            &GainPolicy::new(dmatrix![0.0], cfg.w_z.clone()).unwrap(),
        )
        .unwrap();
        let learned = out.critic.unwrap();
        let rel = (&learned.w - &analytic.w).norm() / analytic.w.norm();
        assert!(rel < 0.1, "{rel} {learned:?} {analytic:?}");
        assert!(out.certificate.audits.all_pass(), "{:?}", out.certificate.audits);
    }
}
