//! Behavioral-cloning-regularized one-step policy gradient for linear
//! quadratic control, with closed-form LQR ground truth and runtime audits
//! of the convergence guarantees.

pub mod bc;
pub mod critic;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod lqr;
pub mod matops;
pub mod rng;
pub mod trainer;

pub use bc::{BehaviorPolicy, FlowBCPolicy, LinearBCModel};
pub use critic::CriticWeights;
pub use dataset::{Dataset, PendulumParams, Transition};
pub use error::{Error, Result};
pub use experiment::{EvalReport, ExperimentConfig};
pub use lqr::{GainPolicy, LinearSystem, QParams, QuadraticCost};
pub use matops::{Matrix, Vector};
pub use trainer::{TheoryCertificate, TraceRow, TrainerConfig};
