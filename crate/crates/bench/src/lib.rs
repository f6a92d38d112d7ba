//! Fixtures shared by the benchmarks.

use flowpg::experiment::{generate_dataset, train_pipeline, ExperimentConfig};
use flowpg::matops::Matrix;
use flowpg::trainer::FrozenSurrogate;

/// Frozen pendulum surrogate and its starting gain from a small dataset.
pub fn pendulum_surrogate() -> (FrozenSurrogate, Matrix) {
    let cfg =
        ExperimentConfig::parse("seed=0\ndataset.episodes=10\ndataset.horizon=100\ntrainer.iterations=0\n")
            .expect("valid bench config");
    let ds = generate_dataset(&cfg).expect("dataset");
    let run = train_pipeline(&cfg, &ds, false).expect("training");
    (run.train.surrogate, run.k0)
}
