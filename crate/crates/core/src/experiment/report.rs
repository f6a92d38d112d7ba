//! Plain-text summary of a run directory's CSV artifacts.

use std::fmt::Write as _;
use std::path::Path;

use super::{BC_LOSS_FILE, CERTIFICATE_FILE, EVAL_SUMMARY_FILE, GRAD_NORM_FILE};
use crate::bc::csv_err;
use crate::error::{Error, Result};
use crate::trainer::load_certificate_header;

fn read_table(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()).map_err(|e| csv_err(path, e)))
        .collect()
}

fn column(path: &Path, rows: &[Vec<String>], idx: usize) -> Result<Vec<f64>> {
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            r.get(idx).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i as u64 + 2,
                msg: format!("column {idx} is missing or not a number"),
            })
        })
        .collect()
}

/// Max over the first and over the last ⌈len/10⌉ entries.
pub fn head_tail_max(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let k = v.len().div_ceil(10);
    let max = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((max(&v[..k]), max(&v[v.len() - k..])))
}

/// Summarizes whichever artifacts `dir` holds. Fails if it holds none.
pub fn summarize_run(dir: &Path) -> Result<String> {
    let mut out = String::new();
    let mut found = 0;

    let path = dir.join(BC_LOSS_FILE);
    if path.is_file() {
        found += 1;
        let loss = column(&path, &read_table(&path)?, 1)?;
        if let (Some(first), Some(last)) = (loss.first(), loss.last()) {
            let _ = writeln!(
                out,
                "bc loss: {first:.6e} -> {last:.6e} over {} epochs ({:.2}% of initial)",
                loss.len() - 1,
                100.0 * last / first
            );
        }
    }

    let path = dir.join(GRAD_NORM_FILE);
    if path.is_file() {
        found += 1;
        let g = column(&path, &read_table(&path)?, 1)?;
        if let Some((head, tail)) = head_tail_max(&g) {
            let _ = writeln!(
                out,
                "grad norm: {} iterations, max first 10% {head:.3e}, max last 10% {tail:.3e}",
                g.len()
            );
        }
    }

    let path = dir.join(CERTIFICATE_FILE);
    if path.is_file() {
        found += 1;
        for (key, vals) in load_certificate_header(&path)? {
            let shown = match key.as_str() {
                "L" | "mu_paper" | "mu_exact" | "eta" | "rate_factor" => vals.first().cloned(),
                k if k.starts_with("audit_") => {
                    let status = vals.first().cloned().unwrap_or_default();
                    let count = vals.get(1).cloned().unwrap_or_default();
                    Some(format!("{status} ({count} violations)"))
                }
                _ => None,
            };
            if let Some(v) = shown {
                let _ = writeln!(out, "certificate {key}: {v}");
            }
        }
    }

    let path = dir.join(EVAL_SUMMARY_FILE);
    if path.is_file() {
        found += 1;
        let rows = read_table(&path)?;
        let means = column(&path, &rows, 1)?;
        let lows = column(&path, &rows, 3)?;
        let highs = column(&path, &rows, 4)?;
        for (i, r) in rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "eval {:<8} mean {:.4} (95% band {:.4} .. {:.4})",
                r[0], means[i], lows[i], highs[i]
            );
        }
    }

    if found == 0 {
        return Err(Error::Input(format!("no run artifacts in {}", dir.display())));
    }
    Ok(out)
}
