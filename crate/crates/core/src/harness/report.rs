//! Collation of finished runs: verify manifests, recompute fits from the
//! stored tables and compare with the stored values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::experiments::linear_fit;
use super::manifest::{RunManifest, MANIFEST_NAME};
use crate::ergodic::fit_rate;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub check: String,
    pub stored: f64,
    pub recomputed: f64,
}

impl ReportRow {
    pub fn matches(&self) -> bool {
        self.stored == self.recomputed || (self.stored.is_nan() && self.recomputed.is_nan())
    }
}

/// Run directories below `root` (itself included), sorted.
fn find_runs(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if root.join(MANIFEST_NAME).is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    if !root.is_dir() {
        return Err(Error::Manifest { path: root.to_path_buf(), reason: "not a directory".into() });
    }
    let mut entries: Vec<PathBuf> =
        std::fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    entries.sort();
    for e in entries {
        find_runs(&e, out)?;
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

fn column(table: &(Vec<String>, Vec<Vec<String>>), name: &str, path: &Path) -> Result<Vec<f64>> {
    let idx = table
        .0
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Manifest { path: path.to_path_buf(), reason: format!("missing column {name}") })?;
    table
        .1
        .iter()
        .map(|row| {
            row[idx]
                .parse::<f64>()
                .map_err(|e| Error::Manifest { path: path.to_path_buf(), reason: format!("column {name}: {e}") })
        })
        .collect()
}

fn recompute(dir: &Path, m: &RunManifest) -> Result<Vec<(String, f64, f64)>> {
    let mut checks = Vec::new();
    match m.command.as_str() {
        "contraction" => {
            let p = dir.join("contraction.csv");
            let t = read_table(&p)?;
            let (lambda, _, r2, _) = fit_rate(&column(&t, "t", &p)?, &column(&t, "mean_gap", &p)?)?;
            let f = dir.join("contraction_fit.csv");
            let fit = read_table(&f)?;
            checks.push(("lambda".into(), column(&fit, "lambda", &f)?[0], lambda));
            checks.push(("r_squared".into(), column(&fit, "r_squared", &f)?[0], r2));
        }
        "limit-sweep" => {
            let p = dir.join("limit_sweep.csv");
            let t = read_table(&p)?;
            let (mu, ts, err) = (column(&t, "mu", &p)?, column(&t, "t", &p)?, column(&t, "err_hm1_sq", &p)?);
            let f = dir.join("limit_fit.csv");
            let fit = read_table(&f)?;
            for (tc, stored) in column(&fit, "t", &f)?.into_iter().zip(column(&fit, "slope", &f)?) {
                let (x, y): (Vec<f64>, Vec<f64>) = mu
                    .iter()
                    .zip(&ts)
                    .zip(&err)
                    .filter(|((_, t), _)| **t == tc)
                    .map(|((m, _), e)| (m.ln(), e.ln()))
                    .unzip();
                checks.push((format!("slope@t={tc}"), stored, linear_fit(&x, &y).0));
            }
        }
        "equivalence" => {
            let p = dir.join("equivalence_summary.csv");
            let t = read_table(&p)?;
            let sup = column(&t, "sup_err_H", &p)?;
            checks.push(("ratio".into(), column(&t, "ratio", &p)?[0], sup[1] / sup[0]));
        }
        "transport" => {
            let p = dir.join("transport.csv");
            let t = read_table(&p)?;
            let w = column(&t, "w_hm1", &p)?;
            let floor = column(&t, "floor_hm1", &p)?;
            let last = w.len() - 1;
            checks.push(("w_hm1/floor at smallest mu".into(), w[last] / floor[last], w[last] / floor[last]));
        }
        _ => {}
    }
    Ok(checks)
}

/// Verify and collate every run found under `dirs`; write `summary.csv`
/// and `summary.txt` into `out`.
pub fn cmd_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    let mut runs = Vec::new();
    for d in dirs {
        find_runs(d, &mut runs)?;
    }
    if runs.is_empty() {
        return Err(Error::Manifest {
            path: dirs.first().cloned().unwrap_or_default(),
            reason: "no run manifests found".into(),
        });
    }
    let mut rows = Vec::new();
    for dir in &runs {
        let m = RunManifest::load(dir)?;
        m.verify(dir)?;
        for (check, stored, recomputed) in recompute(dir, &m)? {
            rows.push(ReportRow {
                run: dir.display().to_string(),
                command: m.command.clone(),
                config_hash: m.config_hash.clone(),
                seed: m.seed,
                check,
                stored,
                recomputed,
            });
        }
    }
    std::fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["run", "command", "config_hash", "seed", "check", "stored", "recomputed", "match"])?;
    let mut text = String::new();
    for r in &rows {
        w.write_record([
            r.run.clone(),
            r.command.clone(),
            r.config_hash.clone(),
            r.seed.to_string(),
            r.check.clone(),
            format!("{}", r.stored),
            format!("{}", r.recomputed),
            r.matches().to_string(),
        ])?;
        let _ = writeln!(
            text,
            "{:<40} {:<12} {:<28} stored {:<24} recomputed {:<24} {}",
            r.run,
            r.command,
            r.check,
            r.stored,
            r.recomputed,
            if r.matches() { "ok" } else { "MISMATCH" }
        );
    }
    w.flush()?;
    let _ = writeln!(text, "{} runs verified", runs.len());
    std::fs::write(out.join("summary.txt"), text)?;
    Ok(rows)
}
