//! LQR ground truth: closed-loop covariance, policy evaluation, average cost,
//! quadratic Q-function parameters and the optimal (unregularized) gain.
//!
//! Stage cost convention: c(x, u) = xᵀR_x x + uᵀR_u u (no ½). The ½ appears
//! only in the quadratic form of the Q-function, `q_value`.

use crate::error::{Error, Result};
use crate::matops::{
    closed_loop, ensure_finite, ensure_shape, ensure_square, ensure_symmetric, inverse, lambda_min,
    solve_discrete_lyapunov, spectral_radius, symmetrize, trace_of_product, LyapunovForm, Matrix, Vector,
    STAB_MARGIN,
};

/// x_{k+1} = A x_k + B u_k + w_k, w_k ~ N(0, W_w).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: Matrix,
    pub b: Matrix,
    pub w_w: Matrix,
}

impl LinearSystem {
    pub fn new(a: Matrix, b: Matrix, w_w: Matrix) -> Result<Self> {
        let n = ensure_square(&a, "A")?;
        ensure_finite(&a, "A")?;
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!("B must be {n}xm, got {}x{}", b.nrows(), b.ncols())));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("B has non-finite entries".into()));
        }
        ensure_shape(&w_w, n, n, "W_w")?;
        ensure_symmetric(&w_w, "W_w")?;
        if lambda_min(&w_w) < -1e-10 {
            return Err(Error::Input("W_w is not PSD".into()));
        }
        Ok(Self { a, b, w_w })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Spectral radius of A + BK.
    pub fn closed_loop_radius(&self, k: &Matrix) -> Result<f64> {
        spectral_radius(&closed_loop(&self.a, &self.b, k)?)
    }

    /// A + BK, or an instability error when K is not stabilizing.
    pub fn stable_closed_loop(&self, k: &Matrix, context: &str) -> Result<Matrix> {
        let f = closed_loop(&self.a, &self.b, k)?;
        let rho = spectral_radius(&f)?;
        if rho >= 1.0 - STAB_MARGIN {
            return Err(Error::Instability { rho, context: context.to_string() });
        }
        Ok(f)
    }

    pub fn step(&self, x: &Vector, u: &Vector, w: &Vector) -> Vector {
        &self.a * x + &self.b * u + w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost {
    pub r_x: Matrix,
    pub r_u: Matrix,
}

impl QuadraticCost {
    pub fn new(r_x: Matrix, r_u: Matrix) -> Result<Self> {
        ensure_symmetric(&r_x, "R_x")?;
        ensure_symmetric(&r_u, "R_u")?;
        ensure_finite(&r_x, "R_x")?;
        ensure_finite(&r_u, "R_u")?;
        if lambda_min(&r_x) < -1e-10 {
            return Err(Error::Input("R_x must be PSD".into()));
        }
        if lambda_min(&r_u) < 1e-10 {
            return Err(Error::Input("R_u must be positive definite".into()));
        }
        Ok(Self { r_x, r_u })
    }

    pub fn stage_cost(&self, x: &Vector, u: &Vector) -> f64 {
        x.dot(&(&self.r_x * x)) + u.dot(&(&self.r_u * u))
    }

    fn check(&self, sys: &LinearSystem) -> Result<()> {
        ensure_shape(&self.r_x, sys.n(), sys.n(), "R_x")?;
        ensure_shape(&self.r_u, sys.m(), sys.m(), "R_u")
    }
}

/// One-step Gaussian policy u = Kx + z, z ~ N(0, W_z).
#[derive(Clone, Debug, PartialEq)]
pub struct GainPolicy {
    pub k: Matrix,
    pub w_z: Matrix,
}

impl GainPolicy {
    pub fn new(k: Matrix, w_z: Matrix) -> Result<Self> {
        ensure_finite(&k, "K")?;
        ensure_shape(&w_z, k.nrows(), k.nrows(), "W_z")?;
        ensure_symmetric(&w_z, "W_z")?;
        if lambda_min(&w_z) < -1e-10 {
            return Err(Error::Input("W_z is not PSD".into()));
        }
        Ok(Self { k, w_z })
    }

    pub fn deterministic(k: Matrix) -> Self {
        let m = k.nrows();
        Self { k, w_z: Matrix::zeros(m, m) }
    }

    fn check(&self, sys: &LinearSystem) -> Result<()> {
        ensure_shape(&self.k, sys.m(), sys.n(), "K")?;
        ensure_shape(&self.w_z, sys.m(), sys.m(), "W_z")
    }
}

/// Blocks of the quadratic Q-function
/// Q(x,u) = ½ [x;u]ᵀ [[S_xx, S_uxᵀ],[S_ux, S_uu]] [x;u] − J.
#[derive(Clone, Debug, PartialEq)]
pub struct QParams {
    pub s_xx: Matrix,
    pub s_ux: Matrix,
    pub s_uu: Matrix,
    pub j: f64,
}

impl QParams {
    pub fn n(&self) -> usize {
        self.s_xx.nrows()
    }

    pub fn m(&self) -> usize {
        self.s_uu.nrows()
    }

    /// The assembled (n+m)×(n+m) block matrix.
    pub fn block(&self) -> Matrix {
        let (n, m) = (self.n(), self.m());
        let mut s = Matrix::zeros(n + m, n + m);
        s.view_mut((0, 0), (n, n)).copy_from(&self.s_xx);
        s.view_mut((n, 0), (m, n)).copy_from(&self.s_ux);
        s.view_mut((0, n), (n, m)).copy_from(&self.s_ux.transpose());
        s.view_mut((n, n), (m, m)).copy_from(&self.s_uu);
        s
    }

    /// Splits an (n+m)-square block matrix back into QParams.
    pub fn from_block(s: &Matrix, n: usize, j: f64) -> Result<Self> {
        let d = ensure_square(s, "Q block matrix")?;
        if n == 0 || n >= d {
            return Err(Error::Dimension(format!("cannot split {d}x{d} block at n={n}")));
        }
        let m = d - n;
        let s = symmetrize(s);
        Ok(Self {
            s_xx: s.view((0, 0), (n, n)).into_owned(),
            s_ux: s.view((n, 0), (m, n)).into_owned(),
            s_uu: s.view((n, n), (m, m)).into_owned(),
            j,
        })
    }
}

/// P from the policy Bellman equation P = R_x + KᵀR_uK + (A+BK)ᵀP(A+BK).
#[derive(Clone, Debug, PartialEq)]
pub struct ValueMatrix {
    pub p: Matrix,
}

/// Stationary state covariance Σ = (A+BK)Σ(A+BK)ᵀ + B W_z Bᵀ + W_w.
pub fn steady_state_covariance(sys: &LinearSystem, pol: &GainPolicy) -> Result<Matrix> {
    pol.check(sys)?;
    let f = sys.stable_closed_loop(&pol.k, "steady-state covariance")?;
    let q = symmetrize(&(&sys.b * &pol.w_z * sys.b.transpose() + &sys.w_w));
    solve_discrete_lyapunov(&f, &q, LyapunovForm::Right)
}

pub fn policy_value(sys: &LinearSystem, cost: &QuadraticCost, k: &Matrix) -> Result<ValueMatrix> {
    cost.check(sys)?;
    ensure_shape(k, sys.m(), sys.n(), "K")?;
    let f = sys.stable_closed_loop(k, "policy evaluation")?;
    let q = symmetrize(&(&cost.r_x + k.transpose() * &cost.r_u * k));
    let p = solve_discrete_lyapunov(&f, &q, LyapunovForm::Left)?;
    Ok(ValueMatrix { p })
}

/// Both closed forms of the average cost:
/// (Tr((R_x + KᵀR_uK)Σ) + Tr(R_uW_z), Tr(P B W_z Bᵀ + P W_w) + Tr(R_uW_z)).
pub fn average_cost_forms(sys: &LinearSystem, cost: &QuadraticCost, pol: &GainPolicy) -> Result<(f64, f64)> {
    let sigma = steady_state_covariance(sys, pol)?;
    let p = policy_value(sys, cost, &pol.k)?.p;
    let exploration = trace_of_product(&cost.r_u, &pol.w_z);
    let stage = &cost.r_x + pol.k.transpose() * &cost.r_u * &pol.k;
    let by_covariance = trace_of_product(&stage, &sigma) + exploration;
    let noise = &sys.b * &pol.w_z * sys.b.transpose() + &sys.w_w;
    let by_value = trace_of_product(&p, &noise) + exploration;
    Ok((by_covariance, by_value))
}

/// Average expected cost J of u = Kx + z. The two closed forms are computed
/// and required to agree to 1e-9 relative.
pub fn average_cost(sys: &LinearSystem, cost: &QuadraticCost, pol: &GainPolicy) -> Result<f64> {
    let (j1, j2) = average_cost_forms(sys, cost, pol)?;
    let scale = j1.abs().max(j2.abs());
    if (j1 - j2).abs() > 1e-9 * scale {
        return Err(Error::Numerical(format!("average-cost forms disagree: {j1} vs {j2}")));
    }
    Ok(j1)
}

/// S_xx = R_x + AᵀPA, S_ux = BᵀPA, S_uu = R_u + BᵀPB with P = policy_value(K).
pub fn q_params(sys: &LinearSystem, cost: &QuadraticCost, pol: &GainPolicy) -> Result<QParams> {
    let p = policy_value(sys, cost, &pol.k)?.p;
    let j = average_cost(sys, cost, pol)?;
    let (a, b) = (&sys.a, &sys.b);
    Ok(QParams {
        s_xx: symmetrize(&(&cost.r_x + a.transpose() * &p * a)),
        s_ux: b.transpose() * &p * a,
        s_uu: symmetrize(&(&cost.r_u + b.transpose() * &p * b)),
        j,
    })
}

/// ½ [x;u]ᵀ S [x;u] − J, evaluated block by block.
pub fn q_value(qp: &QParams, x: &Vector, u: &Vector) -> Result<f64> {
    if x.len() != qp.n() || u.len() != qp.m() {
        return Err(Error::Dimension(format!(
            "q_value expects x in R^{}, u in R^{}, got {} and {}",
            qp.n(),
            qp.m(),
            x.len(),
            u.len()
        )));
    }
    let quad = x.dot(&(&qp.s_xx * x)) + 2.0 * u.dot(&(&qp.s_ux * x)) + u.dot(&(&qp.s_uu * u));
    Ok(0.5 * quad - qp.j)
}

/// K = −(R_u + BᵀPB)⁻¹BᵀPA.
pub fn greedy_gain(sys: &LinearSystem, cost: &QuadraticCost, p: &Matrix) -> Result<Matrix> {
    let (a, b) = (&sys.a, &sys.b);
    let h = &cost.r_u + b.transpose() * p * b;
    Ok(-inverse(&h, "R_u + B^T P B")? * b.transpose() * p * a)
}

const RICCATI_MAX_SWEEPS: usize = 100_000;

/// Optimal average-cost LQR gain via Riccati value iteration from P = 0,
/// polished with a few policy-iteration (evaluate + improve) steps.
pub fn optimal_lqr_gain(sys: &LinearSystem, cost: &QuadraticCost) -> Result<Matrix> {
    cost.check(sys)?;
    let mut p = Matrix::zeros(sys.n(), sys.n());
    let mut converged = false;
    for _ in 0..RICCATI_MAX_SWEEPS {
        let k = greedy_gain(sys, cost, &p)?;
        let f = &sys.a + &sys.b * &k;
        let next = symmetrize(&(&cost.r_x + k.transpose() * &cost.r_u * &k + f.transpose() * &p * &f));
        if next.iter().any(|v| !v.is_finite()) {
            break;
        }
        let delta = (&next - &p).norm();
        p = next;
        if delta <= 1e-12 * (1.0 + p.norm()) {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoSolution(format!(
            "Riccati value iteration did not converge in {RICCATI_MAX_SWEEPS} sweeps"
        )));
    }
    let mut k = greedy_gain(sys, cost, &p)?;
    for _ in 0..5 {
        let Ok(v) = policy_value(sys, cost, &k) else {
            break;
        };
        let improved = greedy_gain(sys, cost, &v.p)?;
        let step = (&improved - &k).norm();
        k = improved;
        if step <= 1e-14 * (1.0 + k.norm()) {
            break;
        }
    }
    if sys.closed_loop_radius(&k)? >= 1.0 - STAB_MARGIN {
        return Err(Error::NoSolution("Riccati fixed point does not yield a stabilizing gain".into()));
    }
    Ok(k)
}

/// First-step gain of a finite-horizon Riccati backward pass with terminal
/// weight R_x. Applied at every step this is a receding-horizon LQ controller.
pub fn receding_horizon_gain(sys: &LinearSystem, cost: &QuadraticCost, horizon: usize) -> Result<Matrix> {
    cost.check(sys)?;
    if horizon == 0 {
        return Err(Error::Input("receding horizon must be >= 1".into()));
    }
    let mut p = cost.r_x.clone();
    let mut k = Matrix::zeros(sys.m(), sys.n());
    for _ in 0..horizon {
        k = greedy_gain(sys, cost, &p)?;
        let f = &sys.a + &sys.b * &k;
        p = symmetrize(&(&cost.r_x + k.transpose() * &cost.r_u * &k + f.transpose() * &p * &f));
    }
    Ok(k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matops::is_psd;
    use crate::rng::{seeded, GaussianSampler};
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use rand::Rng;

    fn scalar(a: f64, b: f64, w_w: f64) -> LinearSystem {
        LinearSystem::new(dmatrix![a], dmatrix![b], dmatrix![w_w]).unwrap()
    }

    fn unit_cost() -> QuadraticCost {
        QuadraticCost::new(dmatrix![1.0], dmatrix![1.0]).unwrap()
    }

    fn pendulum() -> LinearSystem {
        LinearSystem::new(dmatrix![1.0, 0.05; -0.5, 1.0], dmatrix![0.0; 0.05], Matrix::identity(2, 2) * 1e-4)
            .unwrap()
    }

    fn pendulum_cost() -> QuadraticCost {
        QuadraticCost::new(dmatrix![1.0, 0.0; 0.0, 0.1], dmatrix![0.001]).unwrap()
    }

    /// Scalar fixed-point oracle for p = q + f² p.
    fn scalar_fixed_point(f: f64, q: f64) -> f64 {
        let mut p = 0.0;
        for _ in 0..10_000 {
            p = q + f * f * p;
        }
        p
    }

    #[test]
    fn covariance_examples() {
        let sys = scalar(0.5, 1.0, 1e-4);
        let pol = GainPolicy::new(dmatrix![-0.5], dmatrix![0.01]).unwrap();
        assert_abs_diff_eq!(steady_state_covariance(&sys, &pol).unwrap()[(0, 0)], 0.0101, epsilon = 1e-15);

        let sys = scalar(0.5, 1.0, 1.0);
        let pol = GainPolicy::deterministic(dmatrix![0.0]);
        let sigma = steady_state_covariance(&sys, &pol).unwrap()[(0, 0)];
        assert_abs_diff_eq!(sigma, scalar_fixed_point(0.5, 1.0), epsilon = 1e-14);
        assert_abs_diff_eq!(sigma, 4.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn covariance_recursion_converges_on_pendulum() {
        let sys = pendulum();
        let k = optimal_lqr_gain(&sys, &pendulum_cost()).unwrap();
        let pol = GainPolicy::new(k.clone(), dmatrix![0.01]).unwrap();
        let sigma = steady_state_covariance(&sys, &pol).unwrap();
        let f = &sys.a + &sys.b * &k;
        let q = &sys.b * &pol.w_z * sys.b.transpose() + &sys.w_w;
        let mut s = Matrix::zeros(2, 2);
        let mut prev = s.clone();
        for step in 1..=10_000usize {
            s = &f * &s * f.transpose() + &q;
            if step.is_power_of_two() {
                // monotone in the PSD order
                assert!(is_psd(&(&s - &prev), 1e-15));
                prev = s.clone();
            }
        }
        assert!((s - sigma).norm() < 1e-8);
    }

    #[test]
    fn unstabilizing_gain_is_rejected() {
        let pol = GainPolicy::deterministic(dmatrix![0.0, 0.0]);
        assert!(matches!(steady_state_covariance(&pendulum(), &pol), Err(Error::Instability { .. })));
        assert!(matches!(
            policy_value(&pendulum(), &pendulum_cost(), &pol.k),
            Err(Error::Instability { .. })
        ));
    }

    #[test]
    fn policy_value_examples() {
        let sys = scalar(0.5, 1.0, 1.0);
        let p = policy_value(&sys, &unit_cost(), &dmatrix![0.0]).unwrap().p[(0, 0)];
        assert_abs_diff_eq!(p, scalar_fixed_point(0.5, 1.0), epsilon = 1e-14);
        let p = policy_value(&sys, &unit_cost(), &dmatrix![-0.5]).unwrap().p[(0, 0)];
        assert_abs_diff_eq!(p, 1.25, epsilon = 1e-15);

        // 2-D deadbeat: A + BK = 0
        let sys =
            LinearSystem::new(dmatrix![0.3, 0.1; 0.2, 0.4], Matrix::identity(2, 2), Matrix::zeros(2, 2))
                .unwrap();
        let k = -sys.a.clone();
        let cost = QuadraticCost::new(dmatrix![1.0, 0.2; 0.2, 2.0], dmatrix![1.5, 0.0; 0.0, 0.5]).unwrap();
        let p = policy_value(&sys, &cost, &k).unwrap().p;
        assert_abs_diff_eq!(p, &cost.r_x + k.transpose() * &cost.r_u * &k, epsilon = 1e-14);
    }

    #[test]
    fn average_cost_examples() {
        let sys = scalar(0.5, 1.0, 1.0);
        let pol = GainPolicy::deterministic(dmatrix![0.0]);
        let p = scalar_fixed_point(0.5, 1.0);
        assert_abs_diff_eq!(average_cost(&sys, &unit_cost(), &pol).unwrap(), p * 1.0, epsilon = 1e-13);

        let quiet = LinearSystem::new(sys.a.clone(), sys.b.clone(), dmatrix![0.0]).unwrap();
        let pol = GainPolicy::deterministic(dmatrix![-0.3]);
        assert_eq!(average_cost(&quiet, &unit_cost(), &pol).unwrap(), 0.0);
    }

    #[test]
    fn q_params_scalar() {
        let sys = scalar(0.5, 1.0, 1.0);
        let qp = q_params(&sys, &unit_cost(), &GainPolicy::deterministic(dmatrix![0.0])).unwrap();
        let p = scalar_fixed_point(0.5, 1.0);
        assert_abs_diff_eq!(qp.s_uu[(0, 0)], 1.0 + p, epsilon = 1e-13);
        assert_abs_diff_eq!(qp.s_uu[(0, 0)], 7.0 / 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(qp.s_ux[(0, 0)], 2.0 / 3.0, epsilon = 1e-13);
        assert_abs_diff_eq!(qp.s_xx[(0, 0)], 4.0 / 3.0, epsilon = 1e-13);
    }

    #[test]
    fn q_params_decoupled_control() {
        let sys =
            LinearSystem::new(dmatrix![0.7, 0.1; 0.0, 0.5], Matrix::zeros(2, 1), Matrix::identity(2, 2))
                .unwrap();
        let cost = QuadraticCost::new(Matrix::identity(2, 2), dmatrix![0.3]).unwrap();
        let qp = q_params(&sys, &cost, &GainPolicy::deterministic(dmatrix![0.4, -0.2])).unwrap();
        assert_eq!(qp.s_uu, cost.r_u);
        assert_eq!(qp.s_ux, Matrix::zeros(1, 2));
    }

    #[test]
    fn q_value_examples() {
        let qp = QParams {
            s_xx: dmatrix![4.0 / 3.0],
            s_ux: dmatrix![2.0 / 3.0],
            s_uu: dmatrix![7.0 / 3.0],
            j: 0.0,
        };
        let one = Vector::from_element(1, 1.0);
        // brute force: ½ Σ_ij ξ_i S_ij ξ_j
        let s = qp.block();
        let brute: f64 =
            0.5 * (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| s[(i, j)]).sum::<f64>();
        assert_abs_diff_eq!(q_value(&qp, &one, &one).unwrap(), brute, epsilon = 1e-15);
        assert_abs_diff_eq!(brute, 2.5, epsilon = 1e-15);

        let qp = QParams { j: 0.7, ..qp };
        assert_eq!(q_value(&qp, &Vector::zeros(1), &Vector::zeros(1)).unwrap(), -0.7);
        assert!(matches!(q_value(&qp, &Vector::zeros(2), &one), Err(Error::Dimension(_))));
    }

    #[test]
    fn q_value_matches_assembled_block() {
        let mut rng = seeded(3);
        let g = Matrix::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let s = &g * g.transpose();
        let qp = QParams::from_block(&s, 3, 0.25).unwrap();
        for _ in 0..100 {
            let xi = Vector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            let x = xi.rows(0, 3).into_owned();
            let u = xi.rows(3, 2).into_owned();
            let direct = 0.5 * xi.dot(&(&s * &xi)) - 0.25;
            assert_abs_diff_eq!(q_value(&qp, &x, &u).unwrap(), direct, epsilon = 1e-12);
        }
    }

    #[test]
    fn optimal_gain_scalar() {
        let sys = scalar(0.5, 1.0, 1.0);
        let k = optimal_lqr_gain(&sys, &unit_cost()).unwrap();
        // P solves P² − 0.25P − 1 = 0
        let p = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
        assert_abs_diff_eq!(k[(0, 0)], -0.5 * p / (1.0 + p), epsilon = 1e-12);
        assert_abs_diff_eq!(k[(0, 0)], -0.26557, epsilon = 1e-5);
    }

    #[test]
    fn optimal_gain_expensive_control_vanishes() {
        let sys =
            LinearSystem::new(dmatrix![0.6, 0.2; -0.1, 0.4], dmatrix![1.0; 0.5], Matrix::identity(2, 2))
                .unwrap();
        let cost = QuadraticCost::new(Matrix::identity(2, 2), dmatrix![1e8]).unwrap();
        assert!(optimal_lqr_gain(&sys, &cost).unwrap().norm() <= 1e-6);
    }

    #[test]
    fn optimal_gain_pendulum_is_stabilizing_and_locally_optimal() {
        let sys = pendulum();
        let cost = pendulum_cost();
        let k = optimal_lqr_gain(&sys, &cost).unwrap();
        assert!(sys.closed_loop_radius(&k).unwrap() < 1.0);
        let pol = |k: Matrix| GainPolicy::new(k, dmatrix![0.01]).unwrap();
        let j_opt = average_cost(&sys, &cost, &pol(k.clone())).unwrap();
        let mut rng = seeded(11);
        for _ in 0..20 {
            let d = Matrix::from_fn(1, 2, |_, _| rng.random_range(-1.0..1.0));
            let d = &d * (1e-4 / d.norm());
            assert!(average_cost(&sys, &cost, &pol(&k + d)).unwrap() > j_opt);
        }
    }

    fn random_instance(rng: &mut crate::rng::SimRng) -> (LinearSystem, QuadraticCost, GainPolicy) {
        let n = rng.random_range(1..=4);
        let m = rng.random_range(1..=4);
        let a = Matrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let b = Matrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
        let k = Matrix::from_fn(m, n, |_, _| rng.random_range(-0.5..0.5));
        // rescale A so that A + BK has radius in (0.1, 0.9)
        let f = &a + &b * &k;
        let target = rng.random_range(0.1..0.9);
        let rho = spectral_radius(&f).unwrap().max(1e-3);
        let f = f * (target / rho);
        let a = &f - &b * &k;
        let psd = |rng: &mut crate::rng::SimRng, d: usize, floor: f64| {
            let g = Matrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
            &g * g.transpose() + Matrix::identity(d, d) * floor
        };
        let w_w = psd(rng, n, 0.0);
        let r_x = psd(rng, n, 0.0);
        let r_u = psd(rng, m, 0.1);
        let w_z = psd(rng, m, 0.0) * 0.1;
        (
            LinearSystem::new(a, b, w_w).unwrap(),
            QuadraticCost::new(r_x, r_u).unwrap(),
            GainPolicy::new(k, w_z).unwrap(),
        )
    }

    #[test]
    fn lemma2_forms_agree_on_random_instances() {
        let mut rng = seeded(2024);
        for _ in 0..50 {
            let (sys, cost, pol) = random_instance(&mut rng);
            let (j1, j2) = average_cost_forms(&sys, &cost, &pol).unwrap();
            assert!((j1 - j2).abs() <= 1e-9 * j1.abs().max(j2.abs()));
        }
    }

    #[test]
    fn q_params_are_bellman_consistent_and_psd() {
        let mut rng = seeded(99);
        for _ in 0..50 {
            let (sys, cost, pol) = random_instance(&mut rng);
            let qp = q_params(&sys, &cost, &pol).unwrap();
            assert!(is_psd(&qp.block(), 1e-9 * (1.0 + qp.block().norm())));
            let p = policy_value(&sys, &cost, &pol.k).unwrap().p;
            let k = &pol.k;
            let closed =
                &qp.s_xx + k.transpose() * &qp.s_ux + qp.s_ux.transpose() * k + k.transpose() * &qp.s_uu * k;
            let x = Vector::from_fn(sys.n(), |_, _| rng.random_range(-1.0..1.0));
            let x_next = (&sys.a + &sys.b * k) * &x;
            let u = k * &x;
            let lhs = x.dot(&(&closed * &x));
            let rhs = cost.stage_cost(&x, &u) + x_next.dot(&(&p * &x_next));
            assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn average_cost_matches_monte_carlo_on_pendulum() {
        let sys = pendulum();
        let cost = pendulum_cost();
        let k = optimal_lqr_gain(&sys, &cost).unwrap();
        let pol = GainPolicy::new(k.clone(), dmatrix![0.01]).unwrap();
        let (j1, j2) = average_cost_forms(&sys, &cost, &pol).unwrap();
        assert!((j1 - j2).abs() <= 1e-9 * j1);
        let sigma = steady_state_covariance(&sys, &pol).unwrap();

        let mut rng = seeded(5);
        let w = GaussianSampler::new(&sys.w_w).unwrap();
        let z = GaussianSampler::new(&pol.w_z).unwrap();
        let mut x = GaussianSampler::new(&sigma).unwrap().sample(&mut rng);
        let (batches, per_batch) = (1000usize, 1000usize);
        let mut means = Vec::with_capacity(batches);
        for _ in 0..batches {
            let mut acc = 0.0;
            for _ in 0..per_batch {
                let u = &k * &x + z.sample(&mut rng);
                acc += cost.stage_cost(&x, &u);
                x = sys.step(&x, &u, &w.sample(&mut rng));
            }
            means.push(acc / per_batch as f64);
        }
        let mean = means.iter().sum::<f64>() / batches as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let se = (var / batches as f64).sqrt();
        assert!((mean - j1).abs() <= 3.0 * se, "mc {mean} vs {j1} (se {se})");
    }
}
