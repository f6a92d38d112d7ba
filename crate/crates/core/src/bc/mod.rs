//! Behavioral cloning of the expert: a flow-matching velocity network and a
//! closed-form linear least-squares baseline.

mod flow;
mod net;

pub(crate) use flow::csv_err;
pub use flow::{
    bc_sample, flow_matching_loss, flow_matching_loss_seeded, load_flow_policy, save_flow_policy,
    train_flow_bc, FlowBCPolicy, FlowItem, FlowTrainConfig, FlowTrainOutput, SampleMode,
};
pub use net::{Activation, ForwardCache, Layer, NetGrads, VelocityNet};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::matops::{inverse, lambda_min, Matrix, Vector};

/// A cloned expert μ_b(x, z) mapping a state and a noise draw to an action.
pub trait BehaviorPolicy: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn act(&self, x: &Vector, z: &Vector) -> Result<Vector>;

    /// Covariance of the noise z fed to `act`.
    fn noise_covariance(&self) -> Matrix {
        Matrix::zeros(self.action_dim(), self.action_dim())
    }

    /// `Some(K_b)` when μ_b(x, z) = K_b·x + z exactly, enabling closed forms.
    fn linear_gain(&self) -> Option<&Matrix> {
        None
    }
}

impl BehaviorPolicy for FlowBCPolicy {
    fn state_dim(&self) -> usize {
        self.net.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.net.action_dim()
    }

    fn act(&self, x: &Vector, z: &Vector) -> Result<Vector> {
        bc_sample(self, x, z)
    }

    fn noise_covariance(&self) -> Matrix {
        self.w_z.clone()
    }
}

/// μ_b(x, z) = K_b·x + z.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearBCModel {
    pub k_b: Matrix,
}

impl BehaviorPolicy for LinearBCModel {
    fn state_dim(&self) -> usize {
        self.k_b.ncols()
    }

    fn action_dim(&self) -> usize {
        self.k_b.nrows()
    }

    fn act(&self, x: &Vector, z: &Vector) -> Result<Vector> {
        if x.len() != self.state_dim() || z.len() != self.action_dim() {
            return Err(Error::Dimension(format!(
                "linear BC expects x in R^{}, z in R^{}",
                self.state_dim(),
                self.action_dim()
            )));
        }
        Ok(&self.k_b * x + z)
    }

    fn linear_gain(&self) -> Option<&Matrix> {
        Some(&self.k_b)
    }
}

/// Below this, Σxxᵀ/N is treated as singular.
pub const MOMENT_FLOOR: f64 = 1e-10;

/// Least-squares gain K_b = (Σ u xᵀ)(Σ x xᵀ)⁻¹.
pub fn fit_linear_bc(ds: &Dataset) -> Result<LinearBCModel> {
    fit_linear_bc_censored(ds, None)
}

/// Like [`fit_linear_bc`] but, given an actuator limit, drops transitions
/// whose action sits on the limit. Clipped actions are censored observations
/// of the expert law and bias the fit toward small gains.
pub fn fit_linear_bc_censored(ds: &Dataset, action_limit: Option<f64>) -> Result<LinearBCModel> {
    if ds.is_empty() {
        return Err(Error::Input("cannot fit BC on an empty dataset".into()));
    }
    let saturated = |u: &Vector| match action_limit {
        Some(lim) => u.iter().any(|a| a.abs() >= lim * (1.0 - 1e-12)),
        None => false,
    };
    let mut sxx = Matrix::zeros(ds.n, ds.n);
    let mut sux = Matrix::zeros(ds.m, ds.n);
    let mut kept = 0usize;
    for tr in ds.transitions.iter().filter(|tr| !saturated(&tr.u)) {
        sxx.ger(1.0, &tr.x, &tr.x, 1.0);
        sux.ger(1.0, &tr.u, &tr.x, 1.0);
        kept += 1;
    }
    if kept == 0 {
        return Err(Error::Input("every transition is saturated; nothing to fit".into()));
    }
    let count = kept as f64;
    let lmin = lambda_min(&(&sxx / count));
    if lmin < MOMENT_FLOOR {
        return Err(Error::Singular(format!(
            "state second moment has λ_min = {lmin:.3e}; K_b is not identifiable"
        )));
    }
    let k_b = sux * inverse(&sxx, "Σ x xᵀ")?;
    Ok(LinearBCModel { k_b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Transition;
    use crate::rng::{seeded, standard_normal};
    use rand_distr::{Distribution, Normal};

    fn ds_from(n: usize, m: usize, pairs: Vec<(Vec<f64>, Vec<f64>)>) -> Dataset {
        let transitions = pairs
            .into_iter()
            .map(|(x, u)| Transition {
                x: Vector::from_vec(x.clone()),
                u: Vector::from_vec(u),
                c: 0.0,
                x_next: Vector::from_vec(x),
            })
            .collect();
        Dataset::new(n, m, 0, "test", transitions).unwrap()
    }

    #[test]
    fn exact_scalar_gain() {
        let ds = ds_from(1, 1, (1..=5).map(|i| (vec![i as f64], vec![-0.5 * i as f64])).collect());
        let k = fit_linear_bc(&ds).unwrap().k_b;
        assert!((k[(0, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn interpolates_two_points() {
        let ds = ds_from(2, 1, vec![(vec![1.0, 0.0], vec![1.0]), (vec![0.0, 1.0], vec![2.0])]);
        let k = fit_linear_bc(&ds).unwrap().k_b;
        assert_eq!(k, Matrix::from_row_slice(1, 2, &[1.0, 2.0]));
    }

    #[test]
    fn recovers_gain_under_tiny_noise_and_residuals_are_orthogonal() {
        let mut rng = seeded(12);
        let k_true = Matrix::from_fn(2, 3, |_, _| Normal::new(0.0, 1.0).unwrap().sample(&mut rng));
        let eps = Normal::new(0.0, 1e-8).unwrap();
        let pairs = (0..200)
            .map(|_| {
                let x = standard_normal(&mut rng, 3);
                let u = &k_true * &x + Vector::from_fn(2, |_, _| eps.sample(&mut rng));
                (x.as_slice().to_vec(), u.as_slice().to_vec())
            })
            .collect();
        let ds = ds_from(3, 2, pairs);
        let k_b = fit_linear_bc(&ds).unwrap().k_b;
        assert!((&k_b - &k_true).norm() < 1e-6);
        let mut ortho = Matrix::zeros(2, 3);
        for tr in &ds.transitions {
            ortho.ger(1.0, &(&tr.u - &k_b * &tr.x), &tr.x, 1.0);
        }
        assert!(ortho.norm() < 1e-9, "{ortho}");
    }

    #[test]
    fn censored_fit_ignores_clipped_actions() {
        let pairs = (1..=10)
            .map(|i| {
                let x = i as f64 * 0.5;
                (vec![x], vec![(-2.0 * x).clamp(-3.0, 3.0)])
            })
            .collect();
        let ds = ds_from(1, 1, pairs);
        let biased = fit_linear_bc(&ds).unwrap().k_b[(0, 0)];
        let k = fit_linear_bc_censored(&ds, Some(3.0)).unwrap().k_b[(0, 0)];
        assert!((k + 2.0).abs() < 1e-14);
        assert!(biased > -2.0 + 0.1);
        let all_clipped = ds_from(1, 1, vec![(vec![5.0], vec![3.0])]);
        assert!(matches!(fit_linear_bc_censored(&all_clipped, Some(3.0)), Err(Error::Input(_))));
    }

    #[test]
    fn singular_moments_are_refused() {
        let ds = ds_from(2, 1, vec![(vec![1.0, 0.0], vec![1.0]), (vec![2.0, 0.0], vec![2.0])]);
        assert!(matches!(fit_linear_bc(&ds), Err(Error::Singular(_))));
    }
}
