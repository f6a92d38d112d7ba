//! Seeded randomness shared by the generators, trainers and evaluators.

use nalgebra::SymmetricEigen;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::matops::{ensure_symmetric, symmetrize, Matrix, Vector};

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for the `index`-th independent stream (episode, rollout, ...).
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_add(index)
}

pub fn standard_normal(rng: &mut impl Rng, dim: usize) -> Vector {
    Vector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Draws from N(0, Σ) through a symmetric square-root factor of Σ, so
/// singular (PSD) covariances are fine.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    factor: Matrix,
    zero: bool,
}

impl GaussianSampler {
    pub fn new(cov: &Matrix) -> Result<Self> {
        ensure_symmetric(cov, "covariance")?;
        let eig = SymmetricEigen::new(symmetrize(cov));
        if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
            return Err(Error::Input("covariance is not PSD".into()));
        }
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let factor = &eig.eigenvectors * Matrix::from_diagonal(&roots);
        let zero = cov.iter().all(|&v| v == 0.0);
        Ok(Self { factor, zero })
    }

    pub fn dim(&self) -> usize {
        self.factor.nrows()
    }

    /// Always consumes `dim` normal draws, so streams stay aligned whether or
    /// not the covariance is zero.
    pub fn sample(&self, rng: &mut impl Rng) -> Vector {
        let e = standard_normal(rng, self.dim());
        if self.zero {
            Vector::zeros(self.dim())
        } else {
            &self.factor * e
        }
    }
}
