//! The pendulum pipeline: expert data, behavioral cloning, one-step policy
//! training with its certificate, and closed-loop evaluation against the LQR,
//! expert and detuned baselines. Every artifact is CSV or key=value text.

mod config;
mod eval;
mod report;

pub use config::{EvalConfig, ExperimentConfig};
pub use eval::{rollout_eval, EvalEnv, EvalReport, EvalSetup};
pub use report::{head_tail_max, summarize_run};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bc::csv_err;
use crate::bc::{
    fit_linear_bc_censored, save_flow_policy, train_flow_bc, BehaviorPolicy, FlowTrainOutput, LinearBCModel,
};
use crate::critic::save_critic;
use crate::dataset::{fmt_real, generate_expert_dataset, save_dataset, Dataset};
use crate::error::{Error, Result, StageContext};
use crate::lqr::{optimal_lqr_gain, GainPolicy, LinearSystem, QuadraticCost};
use crate::matops::{ensure_finite, Matrix};
use crate::trainer::{save_certificate, train_one_step_policy, AuditReport, BcKind, TrainOutput};

pub const DATASET_FILE: &str = "dataset.csv";
pub const BC_LOSS_FILE: &str = "bc_loss.csv";
pub const GRAD_NORM_FILE: &str = "grad_norm.csv";
pub const EVAL_COSTS_FILE: &str = "eval_costs.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.csv";
pub const CERTIFICATE_FILE: &str = "certificate.csv";
pub const POLICY_FILE: &str = "policy.csv";
pub const FLOW_POLICY_FILE: &str = "flow_bc.csv";
pub const CRITIC_FILE: &str = "critic.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Independent seed for one pipeline stage (splitmix64 of seed and tag).
fn stage_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_BC: u64 = 1;
const TAG_TRAINER: u64 = 2;
const TAG_CRITIC: u64 = 3;
const TAG_EVAL: u64 = 4;

/// The model and cost a config describes.
pub fn models(cfg: &ExperimentConfig) -> Result<(LinearSystem, QuadraticCost)> {
    Ok((cfg.system()?, cfg.cost()?))
}

pub fn generate_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (sys, cost) = models(cfg)?;
    generate_expert_dataset(&sys, &cost, &cfg.generator, &cfg.pendulum, cfg.seed)
}

/// Everything produced up to and including the policy-gradient stage.
pub struct TrainedPipeline {
    pub linear_bc: LinearBCModel,
    pub flow_bc: Option<FlowTrainOutput>,
    pub k0: Matrix,
    pub train: TrainOutput,
}

/// BC and one-step policy training on `ds`. The flow model is trained when
/// it is the configured BC or when `train_flow` asks for its loss curve.
/// K⁰ is always the linear BC gain.
pub fn train_pipeline(cfg: &ExperimentConfig, ds: &Dataset, train_flow: bool) -> Result<TrainedPipeline> {
    let (sys, cost) = models(cfg).stage("setup")?;
    let limit = cfg.bc_exclude_saturated.then_some(cfg.pendulum.torque_limit);
    let linear_bc = fit_linear_bc_censored(ds, limit).stage("bc")?;
    let flow_bc = if train_flow || cfg.trainer.bc_kind == BcKind::Flow {
        let mut bc_cfg = cfg.bc.clone();
        bc_cfg.seed = stage_seed(cfg.seed, TAG_BC);
        Some(train_flow_bc(ds, &bc_cfg, cfg.trainer.w_z.clone()).stage("bc")?)
    } else {
        None
    };
    let bc: &dyn BehaviorPolicy = match (&cfg.trainer.bc_kind, &flow_bc) {
        (BcKind::Flow, Some(f)) => &f.policy,
        _ => &linear_bc,
    };
    let mut tcfg = cfg.trainer.clone();
    tcfg.seed = stage_seed(cfg.seed, TAG_TRAINER);
    tcfg.critic.seed = stage_seed(cfg.seed, TAG_CRITIC);
    let k0 = linear_bc.k_b.clone();
    let train = train_one_step_policy(&tcfg, ds, bc, Some(&sys), &cost, &k0).stage("train")?;
    Ok(TrainedPipeline { linear_bc, flow_bc, k0, train })
}

/// Evaluation columns, in file order.
pub const EVAL_COLUMNS: [&str; 4] = ["learned", "lqr", "expert", "detuned"];

/// Rolls out the learned gain and the three baselines with common random
/// numbers. All four use the configured policy noise W_z.
pub fn evaluate(cfg: &ExperimentConfig, k_learned: &Matrix) -> Result<Vec<EvalReport>> {
    evaluate_policy(cfg, &GainPolicy::new(k_learned.clone(), cfg.trainer.w_z.clone())?)
}

/// Like [`evaluate`] for an arbitrary policy, which keeps its own W_z.
pub fn evaluate_policy(cfg: &ExperimentConfig, learned: &GainPolicy) -> Result<Vec<EvalReport>> {
    let (sys, cost) = models(cfg)?;
    let k_opt = optimal_lqr_gain(&sys, &cost)?;
    let k_expert = cfg.generator.expert.gain(&sys, &cost)?;
    let w_z = &cfg.trainer.w_z;
    let policies = [
        learned.clone(),
        GainPolicy::new(k_opt.clone(), w_z.clone())?,
        GainPolicy::new(k_expert, w_z.clone())?,
        GainPolicy::new(&k_opt * cfg.eval.detune, w_z.clone())?,
    ];
    let setup = EvalSetup {
        env: cfg.eval.env,
        sys,
        cost,
        limits: cfg.pendulum.clone(),
        init: cfg.generator.init.clone(),
    };
    let seed = stage_seed(cfg.seed, TAG_EVAL);
    policies.iter().map(|pol| rollout_eval(&setup, pol, cfg.eval.rollouts, cfg.eval.horizon, seed)).collect()
}

/// Outcome of a full run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub audits: AuditReport,
    pub k_final: Matrix,
    /// Reports in `EVAL_COLUMNS` order.
    pub eval: Vec<EvalReport>,
}

impl RunSummary {
    pub fn report(&self, column: &str) -> Option<&EvalReport> {
        EVAL_COLUMNS.iter().position(|&c| c == column).map(|i| &self.eval[i])
    }
}

pub fn run_experiment_file(path: &Path) -> Result<RunSummary> {
    run_experiment(&ExperimentConfig::from_file(path).stage("config")?)
}

/// Runs every stage and writes its artifacts into `cfg.output_dir` as soon as
/// the stage finishes, so a failure leaves the earlier outputs in place.
/// Audit failures are reported in the summary, not as errors.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate().stage("config")?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e)).stage("setup")?;

    let ds = generate_dataset(cfg).stage("dataset")?;
    save_dataset(&ds, &out.join(DATASET_FILE)).stage("dataset")?;

    let run = train_pipeline(cfg, &ds, true)?;
    write_training_artifacts(cfg, &run, &out)?;

    let eval = evaluate(cfg, &run.train.k_final).stage("eval")?;
    write_eval(&eval, &out).stage("eval")?;

    let summary = RunSummary {
        out_dir: out.clone(),
        audits: run.train.certificate.audits.clone(),
        k_final: run.train.k_final.clone(),
        eval,
    };
    write_manifest(cfg, &ds, &run, Some(&summary.eval), &out.join(MANIFEST_FILE)).stage("manifest")?;
    Ok(summary)
}

/// bc_loss.csv (when the flow model was trained), grad_norm.csv,
/// certificate.csv, policy.csv and the learned models.
pub fn write_training_artifacts(cfg: &ExperimentConfig, run: &TrainedPipeline, out: &Path) -> Result<()> {
    if let Some(flow) = &run.flow_bc {
        write_series(&out.join(BC_LOSS_FILE), ["epoch", "loss"], &flow.loss_trace).stage("bc")?;
        save_flow_policy(&flow.policy, &out.join(FLOW_POLICY_FILE)).stage("bc")?;
    }
    let t = &run.train;
    let grads: Vec<f64> = t.trace.iter().map(|r| r.grad_fro).collect();
    write_series(&out.join(GRAD_NORM_FILE), ["iter", "grad_fro"], &grads).stage("train")?;
    save_certificate(&t.certificate, &t.trace, &out.join(CERTIFICATE_FILE)).stage("train")?;
    save_gain(&t.k_final, &cfg.trainer.w_z, &out.join(POLICY_FILE)).stage("train")?;
    if let Some(c) = &t.critic {
        save_critic(c, run.k0.ncols(), run.k0.nrows(), &out.join(CRITIC_FILE)).stage("train")?;
    }
    Ok(())
}

fn write_rows(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_series(path: &Path, header: [&str; 2], values: &[f64]) -> Result<()> {
    let head = std::iter::once(header.iter().map(|s| s.to_string()).collect());
    let body = values.iter().enumerate().map(|(i, &v)| vec![i.to_string(), fmt_real(v)]);
    write_rows(path, head.chain(body))
}

/// eval_costs.csv (one row per rollout) and eval_summary.csv (one row per
/// policy with mean, std and the 95% interval).
pub fn write_eval(reports: &[EvalReport], out: &Path) -> Result<()> {
    let mut head = vec!["rollout".to_string()];
    head.extend(EVAL_COLUMNS.iter().take(reports.len()).map(|s| s.to_string()));
    let rollouts = reports.first().map_or(0, |r| r.costs.len());
    let body = (0..rollouts).map(|i| {
        let mut row = vec![i.to_string()];
        row.extend(reports.iter().map(|r| fmt_real(r.costs[i])));
        row
    });
    write_rows(&out.join(EVAL_COSTS_FILE), std::iter::once(head).chain(body))?;

    let head = ["policy", "mean", "std", "ci_low", "ci_high"].map(String::from).to_vec();
    let body = EVAL_COLUMNS.iter().zip(reports).map(|(name, r)| {
        vec![name.to_string(), fmt_real(r.mean), fmt_real(r.std), fmt_real(r.ci_low), fmt_real(r.ci_high)]
    });
    write_rows(&out.join(EVAL_SUMMARY_FILE), std::iter::once(head).chain(body))
}

fn matrix_row(name: &str, k: &Matrix) -> Vec<String> {
    let mut row = vec![name.to_string(), k.nrows().to_string(), k.ncols().to_string()];
    for i in 0..k.nrows() {
        row.extend(k.row(i).iter().map(|&v| fmt_real(v)));
    }
    row
}

/// Two rows, `K,rows,cols,<row-major entries>` and the same for `W_z`.
pub fn save_gain(k: &Matrix, w_z: &Matrix, path: &Path) -> Result<()> {
    write_rows(path, [matrix_row("K", k), matrix_row("W_z", w_z)])
}

pub fn load_gain(path: &Path) -> Result<GainPolicy> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let parse_err = |line: u64, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let mut found: [Option<Matrix>; 2] = [None, None];
    for (i, rec) in reader.records().enumerate() {
        let line = i as u64 + 1;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let slot = match rec.get(0) {
            Some("K") => 0,
            Some("W_z") => 1,
            other => return Err(parse_err(line, format!("unexpected row key {other:?}"))),
        };
        let nums: Vec<&str> = rec.iter().skip(1).collect();
        let dim = |s: &str| s.parse::<usize>().map_err(|_| parse_err(line, format!("bad dimension `{s}`")));
        if nums.len() < 2 {
            return Err(parse_err(line, "missing dimensions".into()));
        }
        let (r, c) = (dim(nums[0])?, dim(nums[1])?);
        if nums.len() != 2 + r * c {
            return Err(parse_err(line, format!("expected {} entries, got {}", r * c, nums.len() - 2)));
        }
        let vals = nums[2..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| parse_err(line, format!("bad number `{s}`"))))
            .collect::<Result<Vec<f64>>>()?;
        found[slot] = Some(Matrix::from_row_slice(r, c, &vals));
    }
    let [Some(k), Some(w_z)] = found else {
        return Err(parse_err(0, "policy file needs both a K and a W_z row".into()));
    };
    ensure_finite(&k, "K")?;
    GainPolicy::new(k, w_z)
}

/// Config echo plus run facts. Contains no timestamps or host details, so
/// reruns are byte-identical.
pub fn write_manifest(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    run: &TrainedPipeline,
    eval: Option<&[EvalReport]>,
    path: &Path,
) -> Result<()> {
    let fmt_k = |k: &Matrix| k.iter().map(|&v| fmt_real(v)).collect::<Vec<_>>().join(",");
    let audits = &run.train.certificate.audits;
    let mut s = String::new();
    let _ = writeln!(s, "# flowpg run manifest");
    let _ = writeln!(s, "version={}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "seed={}", cfg.seed);
    let _ = writeln!(s, "dataset.transitions={}", ds.len());
    let _ = writeln!(s, "result.k0={}", fmt_k(&run.k0));
    let _ = writeln!(s, "result.k_final={}", fmt_k(&run.train.k_final));
    let _ = writeln!(s, "result.k_star={}", fmt_k(&run.train.certificate.k_star));
    let status = match audits.first_failure() {
        None => "pass".to_string(),
        Some(name) => format!("fail:{name}"),
    };
    let _ = writeln!(s, "result.audits={status}");
    let _ = writeln!(s, "result.dominance_paper_violations={}", audits.dominance_paper.violations.len());
    if let Some(reports) = eval {
        for (name, r) in EVAL_COLUMNS.iter().zip(reports) {
            let _ = writeln!(s, "result.eval.{name}.mean={}", fmt_real(r.mean));
        }
    }
    let _ = writeln!(s, "# config");
    s.push_str(&cfg.to_text());
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
