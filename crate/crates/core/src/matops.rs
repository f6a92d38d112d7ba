//! Small dense real-matrix utilities: spectral radius, discrete Lyapunov
//! solves, norms and PSD checks.
//!
//! Everything here works on `nalgebra::DMatrix<f64>`; the systems this crate
//! targets have state dimension at most ~10, so dense direct methods are used
//! throughout.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Strictness margin for the stabilizing-gain test: ρ(A+BK) < 1 − STAB_MARGIN.
pub const STAB_MARGIN: f64 = 1e-9;

/// Asymmetry above this is rejected where symmetric input is required.
pub const SYM_TOL: f64 = 1e-8;

const LYAP_RESIDUAL_TOL: f64 = 1e-10;

/// Which discrete Lyapunov equation to solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LyapunovForm {
    /// X = F X Fᵀ + Q (covariance propagation).
    Right,
    /// X = Fᵀ X F + Q (value / cost-to-go).
    Left,
}

pub fn ensure_square(m: &Matrix, what: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    Ok(m.nrows())
}

pub fn ensure_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::Dimension(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::Input(format!("{what} is empty")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// Largest absolute entry of M − Mᵀ.
pub fn asymmetry(m: &Matrix) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn ensure_symmetric(m: &Matrix, what: &str) -> Result<()> {
    ensure_square(m, what)?;
    let asym = asymmetry(m);
    if asym > SYM_TOL {
        return Err(Error::Input(format!("{what} is not symmetric (max |M - M^T| = {asym:e})")));
    }
    Ok(())
}

/// (M + Mᵀ)/2.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

pub fn lambda_min(m: &Matrix) -> f64 {
    sym_eigenvalues(m)[0]
}

pub fn lambda_max(m: &Matrix) -> f64 {
    *sym_eigenvalues(m).last().expect("nonempty matrix")
}

/// True when the symmetric part of `m` has min eigenvalue ≥ −tol.
pub fn is_psd(m: &Matrix, tol: f64) -> bool {
    m.is_square() && lambda_min(m) >= -tol
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    m.singular_values().max()
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.norm()
}

/// Tr(AB) without forming the product.
pub fn trace_of_product(a: &Matrix, b: &Matrix) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    a.component_mul(&b.transpose()).sum()
}

pub fn inverse(m: &Matrix, what: &str) -> Result<Matrix> {
    ensure_square(m, what)?;
    m.clone()
        .lu()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::Singular(what.to_string()))
}

/// Max modulus over the eigenvalues of a square matrix.
///
/// Eigenvalues come from the real Schur form, with complex pairs read off the
/// 2x2 diagonal blocks.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    ensure_square(m, "spectral_radius input")?;
    ensure_finite(m, "spectral_radius input")?;
    if m.nrows() == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    Ok(schur.complex_eigenvalues().iter().map(|c| c.re.hypot(c.im)).fold(0.0, f64::max))
}

/// A + BK, with conformability checks.
pub fn closed_loop(a: &Matrix, b: &Matrix, k: &Matrix) -> Result<Matrix> {
    let n = ensure_square(a, "A")?;
    if b.nrows() != n {
        return Err(Error::Dimension(format!("B must have {n} rows, got {}", b.nrows())));
    }
    ensure_shape(k, b.ncols(), n, "K")?;
    Ok(a + b * k)
}

pub fn is_stabilizing(a: &Matrix, b: &Matrix, k: &Matrix) -> Result<bool> {
    let f = closed_loop(a, b, k)?;
    Ok(spectral_radius(&f)? < 1.0 - STAB_MARGIN)
}

/// Solves X = F X Fᵀ + Q (right form) or X = Fᵀ X F + Q (left form).
///
/// Uses the Kronecker linear system (I − F⊗F) vec(X) = vec(Q) with one round
/// of iterative refinement; the left form is the right form applied to Fᵀ.
pub fn solve_discrete_lyapunov(f: &Matrix, q: &Matrix, form: LyapunovForm) -> Result<Matrix> {
    match form {
        LyapunovForm::Right => solve_right(f, q),
        LyapunovForm::Left => solve_right(&f.transpose(), q),
    }
}

fn solve_right(f: &Matrix, q: &Matrix) -> Result<Matrix> {
    let n = ensure_square(f, "F")?;
    ensure_finite(f, "F")?;
    ensure_shape(q, n, n, "Q")?;
    ensure_finite(q, "Q")?;
    ensure_symmetric(q, "Q")?;
    let rho = spectral_radius(f)?;
    if rho >= 1.0 {
        return Err(Error::Instability { rho, context: "discrete Lyapunov solve".into() });
    }

    let nn = n * n;
    let system = DMatrix::<f64>::identity(nn, nn) - f.kronecker(f);
    let lu = system.clone().lu();
    // column-major storage makes as_slice() exactly vec(Q)
    let rhs = DVector::from_column_slice(q.as_slice());
    let mut v = lu.solve(&rhs).ok_or_else(|| Error::Singular("I - F (x) F".into()))?;
    let r = &rhs - &system * &v;
    if let Some(dv) = lu.solve(&r) {
        v += dv;
    }
    let x = symmetrize(&Matrix::from_column_slice(n, n, v.as_slice()));

    let residual = (&x - f * &x * f.transpose() - q).norm();
    if residual > LYAP_RESIDUAL_TOL * (1.0 + x.norm()) {
        return Err(Error::Numerical(format!(
            "Lyapunov residual {residual:e} exceeds tolerance (rho = {rho})"
        )));
    }
    Ok(x)
}

/// Residual ‖X − F X Fᵀ − Q‖_F (right) or ‖X − Fᵀ X F − Q‖_F (left).
pub fn lyapunov_residual(f: &Matrix, q: &Matrix, x: &Matrix, form: LyapunovForm) -> f64 {
    match form {
        LyapunovForm::Right => (x - f * x * f.transpose() - q).norm(),
        LyapunovForm::Left => (x - f.transpose() * x * f - q).norm(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    /// Fixed-point oracle X ← F X Fᵀ + Q, iterated until the update stalls.
    fn lyap_fixed_point(f: &Matrix, q: &Matrix) -> Matrix {
        let mut x = q.clone();
        for _ in 0..1_000_000 {
            let next = f * &x * f.transpose() + q;
            let delta = (&next - &x).norm();
            x = next;
            if delta < 1e-15 * (1.0 + x.norm()) {
                break;
            }
        }
        x
    }

    #[test]
    fn radius_examples() {
        assert_abs_diff_eq!(spectral_radius(&Matrix::identity(2, 2)).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(spectral_radius(&dmatrix![0.0, 1.0; 0.0, 0.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(spectral_radius(&dmatrix![0.5, 0.0; 0.0, -0.9]).unwrap(), 0.9, epsilon = 1e-12);
    }

    #[test]
    fn radius_complex_pair() {
        // rotation scaled by 0.8
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let m = dmatrix![0.8 * c, -0.8 * s; 0.8 * s, 0.8 * c];
        assert_abs_diff_eq!(spectral_radius(&m).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn radius_rejects_rectangular() {
        assert!(matches!(spectral_radius(&Matrix::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn lyapunov_zero_f_returns_q() {
        let q = dmatrix![2.0, 0.5; 0.5, 1.0];
        let x = solve_discrete_lyapunov(&Matrix::zeros(2, 2), &q, LyapunovForm::Right).unwrap();
        assert_abs_diff_eq!(x, q, epsilon = 1e-14);
    }

    #[test]
    fn lyapunov_scalar_both_forms() {
        let f = dmatrix![0.5];
        let q = dmatrix![1.0];
        let oracle = lyap_fixed_point(&f, &q)[(0, 0)];
        assert_abs_diff_eq!(oracle, 4.0 / 3.0, epsilon = 1e-14);
        for form in [LyapunovForm::Right, LyapunovForm::Left] {
            let x = solve_discrete_lyapunov(&f, &q, form).unwrap();
            assert_abs_diff_eq!(x[(0, 0)], oracle, epsilon = 1e-14);
        }
    }

    #[test]
    fn lyapunov_diagonal() {
        let f = dmatrix![0.5, 0.0; 0.0, 0.2];
        let q = Matrix::identity(2, 2);
        let oracle = lyap_fixed_point(&f, &q);
        assert_abs_diff_eq!(oracle, dmatrix![4.0 / 3.0, 0.0; 0.0, 25.0 / 24.0], epsilon = 1e-13);
        let x = solve_discrete_lyapunov(&f, &q, LyapunovForm::Right).unwrap();
        assert_abs_diff_eq!(x, oracle, epsilon = 1e-13);
    }

    #[test]
    fn lyapunov_errors() {
        let q = Matrix::identity(2, 2);
        let unstable = dmatrix![1.1, 0.0; 0.0, 0.1];
        assert!(matches!(
            solve_discrete_lyapunov(&unstable, &q, LyapunovForm::Right),
            Err(Error::Instability { .. })
        ));
        let asym = dmatrix![1.0, 1e-6; 0.0, 1.0];
        assert!(matches!(
            solve_discrete_lyapunov(&Matrix::zeros(2, 2), &asym, LyapunovForm::Right),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn stabilizing_examples() {
        let a = dmatrix![1.0, 0.05; -0.5, 1.0];
        let b = dmatrix![0.0; 0.05];
        assert!(!is_stabilizing(&a, &b, &dmatrix![0.0, 0.0]).unwrap());
        assert!(is_stabilizing(&dmatrix![0.5], &dmatrix![1.0], &dmatrix![0.0]).unwrap());
        assert!(is_stabilizing(&dmatrix![0.5], &dmatrix![1.0], &dmatrix![-0.5]).unwrap());
        assert!(matches!(is_stabilizing(&a, &b, &dmatrix![0.0]), Err(Error::Dimension(_))));
    }

    fn stable_matrix(n: usize) -> impl Strategy<Value = Matrix> {
        (prop::collection::vec(-1.0f64..1.0, n * n), 0.05f64..0.95).prop_map(move |(v, target)| {
            let m = Matrix::from_vec(n, n, v);
            let rho = spectral_radius(&m).unwrap().max(1e-3);
            m * (target / rho)
        })
    }

    fn psd_matrix(n: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
            let g = Matrix::from_vec(n, n, v);
            &g * g.transpose()
        })
    }

    proptest! {
        #[test]
        fn lyapunov_matches_truncated_series((f, q) in (1usize..=4).prop_flat_map(|n| (stable_matrix(n), psd_matrix(n)))) {
            let x = solve_discrete_lyapunov(&f, &q, LyapunovForm::Right).unwrap();
            // Σ_j F^j Q (F^j)ᵀ until ‖F^J‖ < 1e-12
            let mut series = Matrix::zeros(f.nrows(), f.nrows());
            let mut fj = Matrix::identity(f.nrows(), f.nrows());
            while fj.norm() >= 1e-12 {
                series += &fj * &q * fj.transpose();
                fj = &f * fj;
            }
            prop_assert!((&x - &series).norm() <= 1e-8 * (1.0 + series.norm()));
            prop_assert!(lyapunov_residual(&f, &q, &x, LyapunovForm::Right) <= 1e-10 * (1.0 + x.norm()));
            prop_assert!(is_psd(&x, 1e-10));
        }

        #[test]
        fn left_form_is_right_form_of_transpose((f, q) in (1usize..=4).prop_flat_map(|n| (stable_matrix(n), psd_matrix(n)))) {
            let left = solve_discrete_lyapunov(&f, &q, LyapunovForm::Left).unwrap();
            let right = solve_discrete_lyapunov(&f.transpose(), &q, LyapunovForm::Right).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn radius_is_homogeneous(v in prop::collection::vec(-1.0f64..1.0, 16), c in -3.0f64..3.0) {
            let m = Matrix::from_vec(4, 4, v);
            let r = spectral_radius(&m).unwrap();
            let rc = spectral_radius(&(&m * c)).unwrap();
            prop_assert!((rc - c.abs() * r).abs() <= 1e-10 * (1.0 + rc));
        }
    }
}
