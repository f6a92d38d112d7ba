//! Per-iteration training trace, the constants it is audited against, and the
//! dominance/rate/stability audits themselves.

use std::path::Path;

use super::SMode;
use crate::bc::csv_err;
use crate::error::{Error, Result};
use crate::matops::Matrix;

/// Relative slack allowed on every audited inequality.
pub const AUDIT_REL_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    /// l(Kᵗ) − l(K*)
    pub gap: f64,
    pub grad_fro: f64,
    /// ρ(A + BKᵗ) when the model is available
    pub rho: Option<f64>,
    /// rate_factorᵗ · gap(0)
    pub rate_bound: f64,
    /// ‖Kᵗ − K*‖_F
    pub k_dist: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Audit {
    pub pass: bool,
    /// Iteration indices where the inequality failed.
    pub violations: Vec<usize>,
    /// False when the audit had nothing to check (e.g. no model for ρ).
    pub evaluated: bool,
}

impl Audit {
    fn from_checks(checks: impl Iterator<Item = (usize, bool)>) -> Self {
        let mut evaluated = false;
        let violations: Vec<usize> =
            checks.inspect(|_| evaluated = true).filter(|&(_, ok)| !ok).map(|(i, _)| i).collect();
        Self { pass: violations.is_empty(), violations, evaluated }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditReport {
    /// gap ≤ ‖∇‖²/(2·mu_paper); informational
    pub dominance_paper: Audit,
    /// gap ≤ ‖∇‖²/(2·mu_exact)
    pub dominance_exact: Audit,
    pub rate: Audit,
    pub stability: Audit,
}

impl AuditReport {
    /// All binding audits (everything except the mu_paper dominance check).
    pub fn all_pass(&self) -> bool {
        self.dominance_exact.pass && self.rate.pass && self.stability.pass
    }

    /// Name of the first failing binding audit.
    pub fn first_failure(&self) -> Option<&'static str> {
        [("dominance_exact", &self.dominance_exact), ("rate", &self.rate), ("stability", &self.stability)]
            .into_iter()
            .find(|(_, a)| !a.pass)
            .map(|(name, _)| name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryCertificate {
    pub l: f64,
    pub mu_paper: f64,
    pub mu_exact: f64,
    pub eta: f64,
    pub alpha: f64,
    pub k_star: Matrix,
    pub rate_factor: f64,
    /// Absolute gap resolution of double precision near K*; added to every
    /// right-hand side so that converged iterates are not flagged for roundoff.
    pub gap_floor: f64,
    pub s_mode: SMode,
    pub audits: AuditReport,
}

/// ½L(c·ε·κ·‖K‖)²: the gap produced by an iterate that is off by the
/// roundoff level of a gradient step, amplified by the condition number.
pub(crate) fn gap_floor(l: f64, mu: f64, k_scale: f64) -> f64 {
    let kappa = if mu > 0.0 { l / mu } else { 1.0 };
    let dk = 100.0 * f64::EPSILON * kappa * k_scale;
    0.5 * l * dk * dk
}

/// Checks the dominance inequality for both constants, the linear rate bound
/// against gap(0), and ρ < 1, at every recorded iteration.
pub fn verify_certificate(trace: &[TraceRow], cert: &TheoryCertificate) -> AuditReport {
    let slack = 1.0 + AUDIT_REL_TOL;
    let floor = cert.gap_floor;
    let dominance = |mu: f64| {
        Audit::from_checks(
            trace
                .iter()
                .map(move |r| (r.iter, r.gap <= r.grad_fro * r.grad_fro / (2.0 * mu) * slack + floor)),
        )
    };
    let gap0 = trace.first().map_or(0.0, |r| r.gap);
    let rate = Audit::from_checks(trace.iter().enumerate().map(|(t, r)| {
        let bound = cert.rate_factor.powi(t as i32) * gap0;
        (r.iter, r.gap <= bound * slack + floor)
    }));
    let stability = Audit::from_checks(trace.iter().filter_map(|r| r.rho.map(|rho| (r.iter, rho < 1.0))));
    AuditReport {
        dominance_paper: dominance(cert.mu_paper),
        dominance_exact: dominance(cert.mu_exact),
        rate,
        stability: Audit {
            // nothing to check means nothing failed
            pass: stability.pass,
            ..stability
        },
    }
}

fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn audit_row(name: &str, a: &Audit) -> Vec<String> {
    let status = match (a.evaluated, a.pass) {
        (false, _) => "not_evaluated",
        (true, true) => "pass",
        (true, false) => "fail",
    };
    let mut row = vec![format!("audit_{name}"), status.into(), a.violations.len().to_string()];
    row.extend(a.violations.iter().map(|v| v.to_string()));
    row
}

/// Header block of `key,value...` rows (constants, K*, audits with their
/// violation indices), then the trace table
/// `iter,loss,gap,grad_fro,rho,rate_bound,k_dist`.
pub fn save_certificate(cert: &TheoryCertificate, trace: &[TraceRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path).map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<Vec<String>> = vec![
        vec!["L".into(), fmt_real(cert.l)],
        vec!["mu_paper".into(), fmt_real(cert.mu_paper)],
        vec!["mu_exact".into(), fmt_real(cert.mu_exact)],
        vec!["eta".into(), fmt_real(cert.eta)],
        vec!["alpha".into(), fmt_real(cert.alpha)],
        vec!["rate_factor".into(), fmt_real(cert.rate_factor)],
        vec!["gap_floor".into(), fmt_real(cert.gap_floor)],
        vec!["s_mode".into(), cert.s_mode.to_string()],
    ];
    let mut ks = vec!["K_star".to_string(), cert.k_star.nrows().to_string(), cert.k_star.ncols().to_string()];
    for i in 0..cert.k_star.nrows() {
        ks.extend(cert.k_star.row(i).iter().map(|&v| fmt_real(v)));
    }
    rows.push(ks);
    let a = &cert.audits;
    rows.push(audit_row("dominance_paper", &a.dominance_paper));
    rows.push(audit_row("dominance_exact", &a.dominance_exact));
    rows.push(audit_row("rate", &a.rate));
    rows.push(audit_row("stability", &a.stability));
    rows.push(
        ["iter", "loss", "gap", "grad_fro", "rho", "rate_bound", "k_dist"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    );
    for r in trace {
        rows.push(vec![
            r.iter.to_string(),
            fmt_real(r.loss),
            fmt_real(r.gap),
            fmt_real(r.grad_fro),
            r.rho.map_or_else(|| "NA".to_string(), fmt_real),
            fmt_real(r.rate_bound),
            fmt_real(r.k_dist),
        ]);
    }
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the `key → first value` pairs of a certificate header block.
pub fn load_certificate_header(path: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.get(0) == Some("iter") {
            break;
        }
        let mut it = rec.iter().map(str::to_string);
        if let Some(key) = it.next() {
            out.push((key, it.collect()));
        }
    }
    Ok(out)
}
