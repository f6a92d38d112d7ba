//! `flowpg`: generate expert data, train and audit the one-step policy,
//! evaluate gains and summarize run directories.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 configuration error,
//! 3 numerical or stability failure, 4 a theory audit failed.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowpg::dataset::save_dataset;
use flowpg::experiment::{
    self, evaluate_policy, generate_dataset, load_gain, run_experiment, summarize_run, train_pipeline,
    write_eval, write_manifest, write_training_artifacts, ExperimentConfig, EVAL_COLUMNS,
};
use flowpg::trainer::AuditReport;
use flowpg::Error;

#[derive(Parser)]
#[command(name = "flowpg", version, about = "BC-regularized one-step policy gradient on the pendulum")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat `section.key=value` lines).
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the expert and write dataset.csv.
    GenData(Common),
    /// Train BC and the one-step policy; writes the certificate and policy.csv.
    Train(Common),
    /// Evaluate a saved gain against the LQR, expert and detuned baselines.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Policy file written by `train` or `run`.
        #[arg(long)]
        policy: PathBuf,
    },
    /// Train the one-step policy and run the theory audits only.
    Verify(Common),
    /// Summarize the CSV artifacts in a run directory.
    Report { dir: PathBuf },
    /// Full pipeline: data, BC, training, evaluation, certificate.
    Run(Common),
}

enum Failure {
    Error(Error),
    Audit(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Io { .. } => 1,
        Error::Config(_) | Error::Parse { .. } | Error::Input(_) | Error::Dimension(_) => 2,
        _ => 3,
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::from_file(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<&Path, Error> {
    let out = cfg.output_dir.as_path();
    std::fs::create_dir_all(out).map_err(|source| Error::Io { path: out.to_path_buf(), source })?;
    Ok(out)
}

fn print_audits(a: &AuditReport) {
    for (name, audit) in [
        ("dominance_paper", &a.dominance_paper),
        ("dominance_exact", &a.dominance_exact),
        ("rate", &a.rate),
        ("stability", &a.stability),
    ] {
        let status = match (audit.evaluated, audit.pass) {
            (false, _) => "not evaluated".to_string(),
            (true, true) => "pass".to_string(),
            (true, false) => format!("FAIL ({} violations)", audit.violations.len()),
        };
        println!("audit {name}: {status}");
    }
}

fn audit_outcome(a: &AuditReport) -> Result<(), Failure> {
    print_audits(a);
    match a.first_failure() {
        Some(name) => Err(Failure::Audit(name)),
        None => Ok(()),
    }
}

fn print_eval(reports: &[experiment::EvalReport]) {
    for (name, r) in EVAL_COLUMNS.iter().zip(reports) {
        println!("{name:<8} mean {:.4}  95% band [{:.4}, {:.4}]", r.mean, r.ci_low, r.ci_high);
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenData(c) => {
            let cfg = load_config(&c)?;
            let out = prepare_out(&cfg)?;
            let ds = generate_dataset(&cfg)?;
            let path = out.join(experiment::DATASET_FILE);
            save_dataset(&ds, &path)?;
            println!("wrote {} transitions to {}", ds.len(), path.display());
            Ok(())
        }
        Command::Train(c) => train_like(&c, true),
        Command::Verify(c) => train_like(&c, false),
        Command::Eval { common, policy } => {
            let cfg = load_config(&common)?;
            let out = prepare_out(&cfg)?;
            let pol = load_gain(&policy)?;
            let reports = evaluate_policy(&cfg, &pol)?;
            write_eval(&reports, out)?;
            print_eval(&reports);
            Ok(())
        }
        Command::Report { dir } => {
            print!("{}", summarize_run(&dir)?);
            Ok(())
        }
        Command::Run(c) => {
            let cfg = load_config(&c)?;
            let summary = run_experiment(&cfg)?;
            print_eval(&summary.eval);
            println!("artifacts in {}", summary.out_dir.display());
            audit_outcome(&summary.audits)
        }
    }
}

/// `train` writes every training artifact; `verify` skips the flow model and
/// writes only the certificate.
fn train_like(c: &Common, full: bool) -> Result<(), Failure> {
    let cfg = load_config(c)?;
    let out = prepare_out(&cfg)?;
    let ds = generate_dataset(&cfg)?;
    let run = train_pipeline(&cfg, &ds, full)?;
    if full {
        save_dataset(&ds, &out.join(experiment::DATASET_FILE))?;
        write_training_artifacts(&cfg, &run, out)?;
        write_manifest(&cfg, &ds, &run, None, &out.join(experiment::MANIFEST_FILE))?;
    } else {
        let t = &run.train;
        flowpg::trainer::save_certificate(&t.certificate, &t.trace, &out.join(experiment::CERTIFICATE_FILE))?;
    }
    let k: Vec<String> = run.train.k_final.iter().map(|v| format!("{v:.6}")).collect();
    println!("K_final = [{}]", k.join(", "));
    audit_outcome(&run.train.certificate.audits)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Audit(name)) => {
            eprintln!("error: audit `{name}` failed");
            ExitCode::from(4)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
