//! Configuration, experiment drivers and persistence.
//!
//! Each `cmd_*` function runs one experiment, writes its CSV tables into the
//! output directory and finishes with a `manifest.json` that records the
//! config hash, seed, build, timestamps and a SHA-256 of every table. CSV
//! bodies are pure functions of `(config, seed, build)`; only the manifest
//! carries wall-clock times.

pub mod config;
pub mod experiments;
pub mod manifest;
pub mod report;

use std::fmt::Write as _;
use std::path::Path;

pub use config::ExperimentConfig;
pub use manifest::{OutputFile, RunManifest};

use crate::error::Result;
use crate::model::HypothesisReport;
use experiments::{gate, moment_trend};
use manifest::ManifestBuilder;

/// Human-readable hypothesis report.
pub fn format_validation(r: &HypothesisReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "gamma0            {}", r.gamma0);
    let _ = writeln!(s, "gamma1            {}", r.gamma1);
    let _ = writeln!(s, "sup |gamma'|      {}", r.gamma_prime_bound);
    let _ = writeln!(s, "L_f               {}", r.lf);
    let _ = writeln!(s, "L_sigma           {}", r.lsigma);
    let _ = writeln!(s, "sigma_inf         {}", r.sigma_inf);
    let _ = writeln!(s, "alpha1            {}", r.alpha1);
    let _ = writeln!(s, "noise modes       {}", r.noise_modes);
    let _ = writeln!(s, "Q tail mass       {}", r.tail_mass);
    let _ = writeln!(s, "friction bounds   {}", if r.friction_bounded { "pass" } else { "FAIL" });
    for (name, c) in [("L_f < a1 g0/g1", &r.reaction_condition), ("L_f + L_s/(2 g0) < a1 g0/g1", &r.control_condition)]
    {
        let _ = writeln!(
            s,
            "{name:<28} {} < {}  margin {:.1}%  {}",
            c.lhs,
            c.rhs,
            100.0 * c.margin,
            if c.pass { "pass" } else { "FAIL" }
        );
    }
    let _ = write!(s, "overall           {}", if r.passes() { "pass" } else { "FAIL" });
    s
}

pub fn cmd_validate(cfg: &ExperimentConfig) -> Result<HypothesisReport> {
    Ok(cfg.model()?.hypothesis_check())
}

fn csv_writer(out: &Path, name: &str) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(out.join(name))?)
}

fn num(x: f64) -> String {
    format!("{x}")
}

pub fn cmd_equivalence(cfg: &ExperimentConfig, out: &Path, allow_nonconforming: bool) -> Result<RunManifest> {
    gate(&cfg.model()?, allow_nonconforming)?;
    let mut m = ManifestBuilder::start("equivalence", cfg, out)?;
    let rep = experiments::equivalence(cfg)?;
    let mut w = csv_writer(out, "equivalence.csv")?;
    w.write_record(["t", "err_H", "dt"])?;
    for s in [&rep.coarse, &rep.fine] {
        for (t, e) in s.times.iter().zip(&s.err) {
            w.write_record([num(*t), num(*e), num(s.dt)])?;
        }
    }
    w.flush()?;
    let mut w = csv_writer(out, "equivalence_summary.csv")?;
    w.write_record(["dt", "sup_err_H", "ratio", "halving"])?;
    let halving = rep.ratio > 0.4 && rep.ratio < 0.6;
    for s in [&rep.coarse, &rep.fine] {
        w.write_record([num(s.dt), num(s.sup), num(rep.ratio), halving.to_string()])?;
    }
    w.flush()?;
    m.finish(&["equivalence.csv", "equivalence_summary.csv"])
}

pub fn cmd_contraction(cfg: &ExperimentConfig, out: &Path, allow_nonconforming: bool) -> Result<RunManifest> {
    gate(&cfg.model()?, allow_nonconforming)?;
    let mut m = ManifestBuilder::start("contraction", cfg, out)?;
    let rep = experiments::contraction(cfg)?;
    let mut w = csv_writer(out, "contraction.csv")?;
    w.write_record(["t", "mean_gap"])?;
    for (t, g) in rep.times.iter().zip(&rep.mean_gap) {
        w.write_record([num(*t), num(*g)])?;
    }
    w.flush()?;
    let mut w = csv_writer(out, "contraction_fit.csv")?;
    w.write_record(["config_hash", "seed", "lambda", "intercept", "r_squared", "window", "initial_gap"])?;
    w.write_record([
        cfg.hash(),
        cfg.seed.to_string(),
        num(rep.lambda),
        num(rep.intercept),
        num(rep.r_squared),
        rep.window.to_string(),
        num(rep.initial_gap),
    ])?;
    w.flush()?;
    m.finish(&["contraction.csv", "contraction_fit.csv"])
}

pub fn cmd_limit_sweep(cfg: &ExperimentConfig, out: &Path, allow_nonconforming: bool) -> Result<RunManifest> {
    gate(&cfg.model()?, allow_nonconforming)?;
    let mut m = ManifestBuilder::start("limit-sweep", cfg, out)?;
    let rep = experiments::limit_sweep(cfg)?;
    let mut w = csv_writer(out, "limit_sweep.csv")?;
    w.write_record(["mu", "t", "err_hm1_sq", "se", "wave_dt"])?;
    for p in &rep.points {
        for c in &p.checkpoints {
            w.write_record([num(p.mu), num(c.t), num(c.mean), num(c.se), num(p.wave_dt)])?;
        }
    }
    w.flush()?;
    let mut w = csv_writer(out, "limit_integrated.csv")?;
    w.write_record(["mu", "integrated_h_sq", "se"])?;
    for p in &rep.points {
        w.write_record([num(p.mu), num(p.integrated), num(p.integrated_se)])?;
    }
    w.flush()?;
    let mut w = csv_writer(out, "limit_fit.csv")?;
    w.write_record(["t", "slope", "intercept"])?;
    for (t, s, c) in &rep.slopes {
        w.write_record([num(*t), num(*s), num(*c)])?;
    }
    w.flush()?;
    m.finish(&["limit_sweep.csv", "limit_integrated.csv", "limit_fit.csv"])
}

pub fn cmd_transport(cfg: &ExperimentConfig, out: &Path, allow_nonconforming: bool) -> Result<RunManifest> {
    gate(&cfg.model()?, allow_nonconforming)?;
    let mut m = ManifestBuilder::start("transport", cfg, out)?;
    let rep = experiments::transport_sweep(cfg)?;
    let mut w = csv_writer(out, "transport.csv")?;
    w.write_record(["mu", "wave_dt", "w_hm1", "floor_hm1", "w_h0", "floor_h0", "w_hm1_off", "floor_hm1_off"])?;
    for p in &rep.points {
        w.write_record([
            num(p.mu),
            num(p.wave_dt),
            num(p.w_hm1),
            num(rep.floor_hm1),
            num(p.w_h0),
            num(rep.floor_h0),
            num(p.w_hm1_off),
            num(rep.floor_hm1_off),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(out, "moments.csv")?;
    w.write_record([
        "config_hash",
        "seed",
        "mu",
        "form",
        "h1",
        "h1_se",
        "kinetic",
        "kinetic_se",
        "l2",
        "l2_se",
        "hm1",
        "hm1_se",
        "energy",
        "energy_se",
        "lag_autocorrelation",
    ])?;
    let rows = rep.points.iter().map(|p| (num(p.mu), "wave", &p.moments)).chain(std::iter::once((
        String::new(),
        "limit-u",
        &rep.limit_moments,
    )));
    for (mu, form, r) in rows {
        let (k, kse) = r.kinetic.map_or((String::new(), String::new()), |e| (num(e.mean), num(e.se)));
        w.write_record([
            cfg.hash(),
            cfg.seed.to_string(),
            mu,
            form.to_string(),
            num(r.h1.mean),
            num(r.h1.se),
            k,
            kse,
            num(r.l2.mean),
            num(r.l2.se),
            num(r.h_minus1.mean),
            num(r.h_minus1.se),
            num(r.energy.mean),
            num(r.energy.se),
            r.lag_autocorrelation.map_or(String::new(), num),
        ])?;
    }
    w.flush()?;
    let trend = moment_trend(&rep.points);
    let mut w = csv_writer(out, "moment_trend.csv")?;
    w.write_record(["max_over_min", "slope_vs_log_mu", "slope_low", "slope_high", "spearman"])?;
    w.write_record([
        num(trend.ratio),
        num(trend.slope),
        num(trend.slope_low),
        num(trend.slope_high),
        num(trend.spearman),
    ])?;
    w.flush()?;
    let mut files = vec!["transport.csv", "moments.csv", "moment_trend.csv"];
    if cfg.run.repetitions > 1 {
        let trials = experiments::correction_trials(cfg)?;
        let mut w = csv_writer(out, "correction.csv")?;
        w.write_record(["repetition", "seed", "w_hm1_on", "w_hm1_off"])?;
        for t in trials {
            w.write_record([t.repetition.to_string(), t.seed.to_string(), num(t.w_on), num(t.w_off)])?;
        }
        w.flush()?;
        files.push("correction.csv");
    }
    m.finish(&files)
}

pub use report::cmd_report;
