//! Flat `section.key=value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bc::{Activation, FlowTrainConfig, SampleMode};
use crate::dataset::{ExpertKind, GeneratorConfig, PendulumParams};
use crate::error::{Error, Result};
use crate::experiment::eval::EvalEnv;
use crate::lqr::{LinearSystem, QuadraticCost};
use crate::matops::Matrix;
use crate::trainer::TrainerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub env: EvalEnv,
    pub rollouts: usize,
    pub horizon: usize,
    /// The weak baseline is K_opt scaled by this factor.
    pub detune: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { env: EvalEnv::LinearClipped, rollouts: 50, horizon: 200, detune: 0.2 }
    }
}

/// Everything a pipeline run depends on. Two runs with equal configs produce
/// identical artifacts.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub pendulum: PendulumParams,
    pub process_noise: f64,
    pub r_x_diag: Vec<f64>,
    pub r_u_diag: Vec<f64>,
    pub generator: GeneratorConfig,
    pub bc: FlowTrainConfig,
    /// Fit the linear BC gain only on transitions whose action is not clipped.
    pub bc_exclude_saturated: bool,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            pendulum: PendulumParams::default(),
            process_noise: crate::dataset::PENDULUM_PROCESS_NOISE,
            r_x_diag: vec![1.0, 0.1],
            r_u_diag: vec![0.001],
            generator: GeneratorConfig::default(),
            bc: FlowTrainConfig::default(),
            bc_exclude_saturated: true,
            trainer: TrainerConfig::new(1),
            eval: EvalConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

/// Sub-enums report their own errors as config errors tagged with the key.
fn parse_tagged<T: FromStr<Err = Error>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|e: Error| Error::Config(format!("`{key}`: {e}")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be true or false, got `{v}`"))),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    /// Unknown and repeated keys are errors, as is a missing `seed`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", lineno + 1)));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        if !seen.contains("seed") {
            return Err(Error::Config("`seed` is required".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.pendulum;
        let g = &mut self.generator;
        let t = &mut self.trainer;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "pendulum.mass" => p.mass = parse(key, v)?,
            "pendulum.length" => p.length = parse(key, v)?,
            "pendulum.damping" => p.damping = parse(key, v)?,
            "pendulum.gravity" => p.gravity = parse(key, v)?,
            "pendulum.dt" => p.dt = parse(key, v)?,
            "pendulum.torque_limit" => p.torque_limit = parse(key, v)?,
            "pendulum.speed_limit" => p.speed_limit = parse(key, v)?,
            "pendulum.process_noise" => self.process_noise = parse(key, v)?,
            "cost.r_x" => self.r_x_diag = parse_list(key, v)?,
            "cost.r_u" => self.r_u_diag = parse_list(key, v)?,
            "dataset.episodes" => g.episodes = parse(key, v)?,
            "dataset.horizon" => g.horizon = parse(key, v)?,
            "dataset.noise_std" => g.expert.noise_std = parse(key, v)?,
            "dataset.expert" => {
                g.expert.kind = match v {
                    "lqr" => ExpertKind::Lqr,
                    _ => match v.strip_prefix("receding_horizon:") {
                        Some(h) => ExpertKind::RecedingHorizon { horizon: parse(key, h)? },
                        None => {
                            return Err(Error::Config(format!(
                                "`{key}` must be `lqr` or `receding_horizon:<steps>`, got `{v}`"
                            )))
                        }
                    },
                }
            }
            "bc.hidden" => self.bc.hidden = parse_list(key, v)?,
            "bc.activation" => self.bc.activation = parse_tagged::<Activation>(key, v)?,
            "bc.lr" => self.bc.lr = parse(key, v)?,
            "bc.batch_size" => self.bc.batch_size = parse(key, v)?,
            "bc.epochs" => self.bc.epochs = parse(key, v)?,
            "bc.mode" => self.bc.mode = parse_tagged::<SampleMode>(key, v)?,
            "bc.euler_steps" => self.bc.euler_steps = parse(key, v)?,
            "bc.exclude_saturated" => self.bc_exclude_saturated = parse_bool(key, v)?,
            "critic.lr" => t.critic.lr = parse(key, v)?,
            "critic.batch_size" => t.critic.batch_size = parse(key, v)?,
            "critic.tau" => t.critic.tau = parse(key, v)?,
            "critic.target_every" => t.critic.target_every = parse(key, v)?,
            "critic.loss" => t.critic.loss = parse_tagged(key, v)?,
            "critic.pretrain_steps" => t.critic_pretrain_steps = parse(key, v)?,
            "critic.steps_per_iter" => t.critic_steps_per_iter = parse(key, v)?,
            "trainer.alpha" => t.alpha = parse(key, v)?,
            "trainer.eta" => t.eta = parse_tagged(key, v)?,
            "trainer.iterations" => t.iterations = parse(key, v)?,
            "trainer.critic_mode" => t.critic_mode = parse_tagged(key, v)?,
            "trainer.s_mode" => t.s_mode = parse_tagged(key, v)?,
            "trainer.bc_kind" => t.bc_kind = parse_tagged(key, v)?,
            "trainer.w_z" => t.w_z = Matrix::from_diagonal(&parse_list::<f64>(key, v)?.into()),
            "trainer.cross_moment_samples" => t.cross_moment_samples = parse(key, v)?,
            "eval.env" => self.eval.env = parse_tagged(key, v)?,
            "eval.rollouts" => self.eval.rollouts = parse(key, v)?,
            "eval.horizon" => self.eval.horizon = parse(key, v)?,
            "eval.detune" => self.eval.detune = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(strip_prefix(&e));
        self.pendulum.validate().map_err(cfg_err)?;
        self.system().map_err(cfg_err)?;
        self.cost().map_err(cfg_err)?;
        let m = self.r_u_diag.len();
        if self.trainer.w_z.nrows() != m {
            return Err(Error::Config(format!("trainer.w_z needs {m} entries")));
        }
        let positive = [
            ("dataset.episodes", self.generator.episodes),
            ("dataset.horizon", self.generator.horizon),
            ("bc.batch_size", self.bc.batch_size),
            ("bc.euler_steps", self.bc.euler_steps),
            ("critic.batch_size", self.trainer.critic.batch_size),
            ("critic.target_every", self.trainer.critic.target_every),
            ("trainer.cross_moment_samples", self.trainer.cross_moment_samples),
            ("eval.rollouts", self.eval.rollouts),
            ("eval.horizon", self.eval.horizon),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("`{key}` must be positive")));
            }
        }
        if self.bc.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("`bc.hidden` widths must be positive".into()));
        }
        if !(self.trainer.alpha > 0.0) {
            return Err(Error::Config("`trainer.alpha` must be > 0".into()));
        }
        if !(self.eval.detune.is_finite()) {
            return Err(Error::Config("`eval.detune` must be finite".into()));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("`output_dir` may not be empty".into()));
        }
        Ok(())
    }

    /// Pendulum model with the configured process noise.
    pub fn system(&self) -> Result<LinearSystem> {
        let base = crate::dataset::pendulum_system(&self.pendulum)?;
        if !(self.process_noise >= 0.0) {
            return Err(Error::Input("process noise must be >= 0".into()));
        }
        LinearSystem::new(base.a, base.b, Matrix::identity(2, 2) * self.process_noise)
    }

    pub fn cost(&self) -> Result<QuadraticCost> {
        if self.r_x_diag.len() != 2 || self.r_u_diag.len() != 1 {
            return Err(Error::Dimension(
                "the pendulum needs cost.r_x with 2 entries and cost.r_u with 1".into(),
            ));
        }
        QuadraticCost::new(
            Matrix::from_diagonal(&self.r_x_diag.clone().into()),
            Matrix::from_diagonal(&self.r_u_diag.clone().into()),
        )
    }

    /// Canonical text form: every key, fixed order. Parsing it gives back an
    /// equal config.
    pub fn to_text(&self) -> String {
        let p = &self.pendulum;
        let g = &self.generator;
        let t = &self.trainer;
        let expert = match &g.expert.kind {
            ExpertKind::Lqr => "lqr".to_string(),
            ExpertKind::RecedingHorizon { horizon } => format!("receding_horizon:{horizon}"),
            ExpertKind::Gain(_) => "gain".to_string(),
        };
        let w_z: Vec<f64> = t.w_z.diagonal().iter().copied().collect();
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("pendulum.mass", p.mass.to_string()),
            ("pendulum.length", p.length.to_string()),
            ("pendulum.damping", p.damping.to_string()),
            ("pendulum.gravity", p.gravity.to_string()),
            ("pendulum.dt", p.dt.to_string()),
            ("pendulum.torque_limit", p.torque_limit.to_string()),
            ("pendulum.speed_limit", p.speed_limit.to_string()),
            ("pendulum.process_noise", self.process_noise.to_string()),
            ("cost.r_x", join(&self.r_x_diag)),
            ("cost.r_u", join(&self.r_u_diag)),
            ("dataset.episodes", g.episodes.to_string()),
            ("dataset.horizon", g.horizon.to_string()),
            ("dataset.expert", expert),
            ("dataset.noise_std", g.expert.noise_std.to_string()),
            ("bc.hidden", join(&self.bc.hidden)),
            ("bc.activation", self.bc.activation.to_string()),
            ("bc.lr", self.bc.lr.to_string()),
            ("bc.batch_size", self.bc.batch_size.to_string()),
            ("bc.epochs", self.bc.epochs.to_string()),
            ("bc.mode", self.bc.mode.to_string()),
            ("bc.euler_steps", self.bc.euler_steps.to_string()),
            ("bc.exclude_saturated", self.bc_exclude_saturated.to_string()),
            ("critic.lr", t.critic.lr.to_string()),
            ("critic.batch_size", t.critic.batch_size.to_string()),
            ("critic.tau", t.critic.tau.to_string()),
            ("critic.target_every", t.critic.target_every.to_string()),
            ("critic.loss", t.critic.loss.to_string()),
            ("critic.pretrain_steps", t.critic_pretrain_steps.to_string()),
            ("critic.steps_per_iter", t.critic_steps_per_iter.to_string()),
            ("trainer.alpha", t.alpha.to_string()),
            ("trainer.eta", t.eta.to_string()),
            ("trainer.iterations", t.iterations.to_string()),
            ("trainer.critic_mode", t.critic_mode.to_string()),
            ("trainer.s_mode", t.s_mode.to_string()),
            ("trainer.bc_kind", t.bc_kind.to_string()),
            ("trainer.w_z", join(&w_z)),
            ("trainer.cross_moment_samples", t.cross_moment_samples.to_string()),
            ("eval.env", self.eval.env.to_string()),
            ("eval.rollouts", self.eval.rollouts.to_string()),
            ("eval.horizon", self.eval.horizon.to_string()),
            ("eval.detune", self.eval.detune.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

/// Drops the "config error: " prefix when re-wrapping an error message.
fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
