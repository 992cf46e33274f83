//! Experiment drivers. Each returns plain data; file output lives in the
//! command layer.
//!
//! All stochastic comparisons use common random numbers: the runs being
//! compared draw from the same `(seed, label, replica)` streams at a common
//! finest noise resolution, and coarser steppers consume sums of the fine
//! increments.

use rayon::prelude::*;
use serde::Serialize;

use super::config::{ExperimentConfig, InitialName, RunConfig};
use crate::ergodic::{self, ContractionConfig, ContractionReport, LimitForm, MomentReport, StationaryRunConfig};
use crate::error::{Error, Result};
use crate::grid::{Field, SobolevIndex};
use crate::integrators::{
    simulate, step_count, wave_substeps, Correction, ParabolicState, RhoStepper, StepConfig, Stepper, UStepper,
    WaveState, WaveStepper,
};
use crate::model::{HypothesisReport, ModelSpec};
use crate::noise::derive_stream;
use crate::transport::{self, EmpiricalMeasure};

/// Reject a model that fails the standing hypotheses unless explicitly allowed.
pub fn gate(model: &ModelSpec, allow_nonconforming: bool) -> Result<HypothesisReport> {
    let report = model.hypothesis_check();
    if !report.passes() && !allow_nonconforming {
        return Err(Error::Nonconforming(report.failures().join("; ")));
    }
    Ok(report)
}

/// Smallest divisor of `n` that is at least `required`.
pub fn coupled_substeps(n: usize, required: usize) -> usize {
    (required.max(1)..=n).find(|d| n % d == 0).unwrap_or(n)
}

/// Noise resolution shared by every run of a sweep: fine enough for the
/// wave at the smallest mass.
pub fn finest_substeps(cfg: &ExperimentConfig) -> usize {
    wave_substeps(cfg.integrator.dt, cfg.mu_min(), cfg.integrator.wave_resolution)
}

/// Wave step for mass `mu` under a fine resolution of `n_fine` per `dt`.
pub fn wave_dt(cfg: &ExperimentConfig, mu: f64, n_fine: usize) -> f64 {
    let dt = cfg.integrator.dt;
    dt / coupled_substeps(n_fine, wave_substeps(dt, mu, cfg.integrator.wave_resolution)) as f64
}

pub fn initial_field(model: &ModelSpec, run: &RunConfig) -> Result<Field> {
    let dom = model.domain();
    Ok(match run.initial {
        InitialName::Zero | InitialName::Stationary => dom.zeros(),
        InitialName::Mode => dom.mode(1)?.scale(run.amplitude),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceSeries {
    pub dt: f64,
    pub times: Vec<f64>,
    /// Replica RMS of `|g(u(t)) - rho(t)|_H`.
    pub err: Vec<f64>,
    pub sup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub coarse: EquivalenceSeries,
    pub fine: EquivalenceSeries,
    /// `sup(dt/2) / sup(dt)`.
    pub ratio: f64,
}

fn equivalence_series(
    model: &ModelSpec,
    step: &StepConfig,
    run: &RunConfig,
    seed: u64,
    level: usize,
) -> Result<EquivalenceSeries> {
    let dom = model.domain();
    let dt = step.dt / (1 << level) as f64;
    let step = step.with_dt(dt);
    let substeps = 2 >> level;
    let stride = run.observe_every << level;
    let n = step_count(run.horizon, dt)?;
    let u0 = initial_field(model, run)?;
    let per_replica: Vec<Vec<f64>> = (0..run.replicas)
        .into_par_iter()
        .map(|r| {
            let (mut s_rho, mut s_u) = derive_stream(seed, "equivalence", r as u64, model.noise_modes()).fork_coupled();
            let mut rho = ParabolicState::new(model.g_field(&u0));
            let mut u = ParabolicState::new(u0.clone());
            let mut st_rho = RhoStepper::new(model, step);
            let mut st_u = UStepper::new(model, step);
            let fine = dt / substeps as f64;
            let mut dw = vec![0.0; model.noise_modes()];
            let mut errs = vec![0.0];
            for k in 1..=n {
                s_rho.increment_into(fine, substeps, &mut dw);
                st_rho.step(&mut rho, &dw).map_err(|e| Error::Step { step: k, source: Box::new(e) })?;
                s_u.increment_into(fine, substeps, &mut dw);
                st_u.step(&mut u, &dw).map_err(|e| Error::Step { step: k, source: Box::new(e) })?;
                if k % stride == 0 {
                    errs.push(dom.inner(&model.g_field(&u.w).sub(&rho.w), &model.g_field(&u.w).sub(&rho.w)));
                }
            }
            Ok(errs)
        })
        .collect::<Result<_>>()?;
    let len = per_replica[0].len();
    let err: Vec<f64> =
        (0..len).map(|i| (per_replica.iter().map(|e| e[i]).sum::<f64>() / run.replicas as f64).sqrt()).collect();
    let times = (0..len).map(|i| (i * stride) as f64 * dt).collect();
    let sup = err.iter().copied().fold(0.0, f64::max);
    Ok(EquivalenceSeries { dt, times, err, sup })
}

/// Coupled rho-form and u-form runs at `dt` and `dt/2`, both driven by the
/// same Brownian paths sampled at resolution `dt/2`.
pub fn equivalence(cfg: &ExperimentConfig) -> Result<EquivalenceReport> {
    let model = cfg.model()?;
    let step = cfg.step();
    let coarse = equivalence_series(&model, &step, &cfg.run, cfg.seed, 0)?;
    let fine = equivalence_series(&model, &step, &cfg.run, cfg.seed, 1)?;
    let ratio = fine.sup / coarse.sup;
    Ok(EquivalenceReport { coarse, fine, ratio })
}

/// Contraction of the rho-form from `0` and `g(amplitude * e_1)`.
pub fn contraction(cfg: &ExperimentConfig) -> Result<ContractionReport> {
    let model = cfg.model()?;
    let dom = model.domain();
    let r2 = model.g_field(&dom.mode(1)?.scale(cfg.run.amplitude));
    let c = ContractionConfig {
        horizon: cfg.run.horizon,
        observe_every: cfg.run.observe_every,
        replicas: cfg.run.replicas,
        seed: cfg.seed,
        label: "contraction".into(),
    };
    ergodic::contraction_estimate(&model, LimitForm::Rho, &dom.zeros(), &r2, &cfg.step(), &c)
}

/// Burn-in and spacing from the configuration, or from a pilot rate.
pub fn stationary_run(cfg: &ExperimentConfig, model: &ModelSpec, noise_dt: f64) -> Result<StationaryRunConfig> {
    let r = &cfg.run;
    let k = r.samples / r.replicas;
    let mut run = match (r.burn_in, r.spacing) {
        (Some(b), Some(s)) => StationaryRunConfig::new(b, s, r.replicas, k, noise_dt)?,
        (b, s) => {
            let lambda = ergodic::pilot_rate(model, &cfg.step(), cfg.seed)?;
            let mut p = StationaryRunConfig::from_pilot(lambda, r.replicas, k, noise_dt)?;
            if let Some(b) = b {
                p.burn_in = b;
            }
            if let Some(s) = s {
                p.spacing = s;
            }
            p
        }
    };
    run.mode = r.mode;
    run.seed = cfg.seed;
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointError {
    pub t: f64,
    /// Replica mean of `|g(u_mu(t)) - rho(t)|^2_{H^-1}`.
    pub mean: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitPoint {
    pub mu: f64,
    pub wave_dt: f64,
    pub checkpoints: Vec<CheckpointError>,
    /// Replica mean of `int_0^T |u_mu - B(rho)|^2_H dt`.
    pub integrated: f64,
    pub integrated_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitSweep {
    pub points: Vec<LimitPoint>,
    pub limit_dt: f64,
    /// Per checkpoint: slope and intercept of `log error` against `log mu`.
    pub slopes: Vec<(f64, f64, f64)>,
}

fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (m, f64::NAN);
    }
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Coupled wave and rho-form runs for every mass of the sweep.
///
/// Both systems step at the finest resolution `dt / n_fine` so that the
/// comparison isolates the mass. With `initial = stationary`, each replica
/// first runs the wave for the burn-in time on an independent stream and
/// both systems start from the resulting `(u, v)` and `g(u)`.
pub fn limit_sweep(cfg: &ExperimentConfig) -> Result<LimitSweep> {
    if cfg.mu.len() < 2 {
        return Err(Error::Config("the limit sweep needs at least two masses".into()));
    }
    let model = cfg.model()?;
    let dom = model.domain().clone();
    let n_fine = finest_substeps(cfg);
    let fine_dt = cfg.integrator.dt / n_fine as f64;
    let step = cfg.step().with_dt(fine_dt);
    let run = &cfg.run;
    let checkpoints: Vec<usize> = run.checkpoints.iter().map(|&t| step_count(t, fine_dt)).collect::<Result<_>>()?;
    let horizon = *checkpoints.iter().max().ok_or_else(|| Error::Config("no checkpoints".into()))?;
    let burn_in = match run.initial {
        InitialName::Stationary => Some(stationary_run(cfg, &model, fine_dt)?.burn_in),
        _ => None,
    };
    let u_fixed = initial_field(&model, run)?;
    let mut points = Vec::with_capacity(cfg.mu.len());
    for &mu in &cfg.mu {
        let per_replica: Vec<(Vec<f64>, f64)> = (0..run.replicas)
            .into_par_iter()
            .map(|r| {
                let modes = model.noise_modes();
                let mut wave = WaveState::new(u_fixed.clone(), dom.zeros(), mu)?;
                let mut wstep = WaveStepper::new(&model, fine_dt);
                if let Some(tb) = burn_in {
                    let mut s = derive_stream(cfg.seed, "limit-initial", r as u64, modes);
                    let n = ((tb / fine_dt).round() as usize).max(1);
                    simulate(&mut wstep, &mut wave, &mut s, n as f64 * fine_dt, 1, 0, |_, _| {})?;
                    wave.t = 0.0;
                }
                let mut rho = ParabolicState::new(model.g_field(&wave.u));
                let mut rstep = RhoStepper::new(&model, step);
                let (mut sw, mut sr) = derive_stream(cfg.seed, "limit", r as u64, modes).fork_coupled();
                let mut dw = vec![0.0; modes];
                let mut at = Vec::with_capacity(checkpoints.len());
                let mut integral = 0.0;
                for k in 1..=horizon {
                    sw.increment_into(fine_dt, 1, &mut dw);
                    wstep.step(&mut wave, &dw).map_err(|e| Error::Step { step: k, source: Box::new(e) })?;
                    sr.increment_into(fine_dt, 1, &mut dw);
                    rstep.step(&mut rho, &dw).map_err(|e| Error::Step { step: k, source: Box::new(e) })?;
                    if k % n_fine == 0 || k == horizon {
                        let u = model.g_inverse_field(&rho.w)?;
                        let d = wave.u.sub(&u);
                        // right-endpoint rule on the coarse grid
                        let width = if k % n_fine == 0 { n_fine } else { k % n_fine } as f64 * fine_dt;
                        integral += width * dom.inner(&d, &d);
                    }
                    if checkpoints.contains(&k) {
                        at.push((k, dom.sobolev_norm_sq(&model.g_field(&wave.u).sub(&rho.w), SobolevIndex::H_MINUS_1)));
                    }
                }
                let errs = checkpoints.iter().map(|c| at.iter().find(|(k, _)| k == c).map_or(0.0, |p| p.1)).collect();
                Ok((errs, integral))
            })
            .collect::<Result<_>>()?;
        let checkpoint_errors = run
            .checkpoints
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let v: Vec<f64> = per_replica.iter().map(|p| p.0[i]).collect();
                let (mean, se) = mean_se(&v);
                CheckpointError { t, mean, se }
            })
            .collect();
        let ints: Vec<f64> = per_replica.iter().map(|p| p.1).collect();
        let (integrated, integrated_se) = mean_se(&ints);
        points.push(LimitPoint { mu, wave_dt: fine_dt, checkpoints: checkpoint_errors, integrated, integrated_se });
    }
    let logmu: Vec<f64> = points.iter().map(|p| p.mu.ln()).collect();
    let slopes = run
        .checkpoints
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let y: Vec<f64> = points.iter().map(|p| p.checkpoints[i].mean.ln()).collect();
            let (s, c) = linear_fit(&logmu, &y);
            (t, s, c)
        })
        .collect();
    Ok(LimitSweep { points, limit_dt: fine_dt, slopes })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPoint {
    pub mu: f64,
    pub wave_dt: f64,
    /// `W(Pi_1 nu_mu, nu)` under the `H^-1` ground metric.
    pub w_hm1: f64,
    /// Same under `H^0`.
    pub w_h0: f64,
    /// `H^-1` distance to the limit run without the correction drift.
    pub w_hm1_off: f64,
    pub moments: MomentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportReport {
    pub points: Vec<TransportPoint>,
    pub floor_hm1: f64,
    pub floor_h0: f64,
    pub floor_hm1_off: f64,
    pub limit_moments: MomentReport,
    pub burn_in: f64,
    pub spacing: f64,
    pub limit_dt: f64,
    /// Smallest reduced cost over every exact solve (dual certificate).
    pub min_reduced_cost: f64,
}

/// Exact `W_1` plus its dual certificate.
pub fn certified_w1(a: &EmpiricalMeasure, b: &EmpiricalMeasure, delta: f64) -> Result<(f64, f64)> {
    let cost = transport::cost_matrix(a, b, delta)?;
    let r = transport::w1_exact(&cost)?;
    r.certify(&cost)?;
    Ok((r.value, r.min_reduced_cost(&cost).unwrap_or(0.0)))
}

/// Limit-form samples (u variables) with and without the correction drift.
fn limit_samples(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    run: &StationaryRunConfig,
    limit_dt: f64,
) -> Result<((EmpiricalMeasure, MomentReport), EmpiricalMeasure)> {
    let on = cfg.step().with_dt(limit_dt);
    let off = StepConfig { correction: Correction::Off, ..on };
    let with = ergodic::sample_stationary_parabolic(model, LimitForm::U, &on, run)?;
    let (without, _) = ergodic::sample_stationary_parabolic(model, LimitForm::U, &off, run)?;
    Ok((with, without))
}

/// Stationary wave marginals for every mass against the stationary limit,
/// all under common random numbers. The limit runs at the same step as the
/// wave at the smallest mass.
pub fn transport_sweep(cfg: &ExperimentConfig) -> Result<TransportReport> {
    let model = cfg.model()?;
    let n_fine = finest_substeps(cfg);
    let noise_dt = cfg.integrator.dt / n_fine as f64;
    let mut run = stationary_run(cfg, &model, noise_dt)?;
    run.initial_u = Some(initial_field(&model, &cfg.run)?);
    let limit_dt = wave_dt(cfg, cfg.mu_min(), n_fine);
    let ((limit, limit_moments), limit_off) = limit_samples(cfg, &model, &run, limit_dt)?;
    let splits = cfg.run.splits;
    let floor_hm1 = transport::noise_floor(&limit, -1.0, splits, cfg.seed)?;
    let floor_h0 = transport::noise_floor(&limit, 0.0, splits, cfg.seed)?;
    let floor_hm1_off = transport::noise_floor(&limit_off, -1.0, splits, cfg.seed)?;
    let mut min_rc = f64::INFINITY;
    let mut points = Vec::new();
    for &mu in &cfg.mu {
        let dtw = wave_dt(cfg, mu, n_fine);
        let step = cfg.step().with_dt(dtw);
        let samples = ergodic::sample_stationary_wave(&model, mu, &step, &run)?;
        let (w_hm1, a) = certified_w1(&samples.u, &limit, -1.0)?;
        let (w_h0, b) = certified_w1(&samples.u, &limit, 0.0)?;
        let (w_hm1_off, c) = certified_w1(&samples.u, &limit_off, -1.0)?;
        min_rc = min_rc.min(a).min(b).min(c);
        points.push(TransportPoint { mu, wave_dt: dtw, w_hm1, w_h0, w_hm1_off, moments: samples.moments });
    }
    Ok(TransportReport {
        points,
        floor_hm1,
        floor_h0,
        floor_hm1_off,
        limit_moments,
        burn_in: run.burn_in,
        spacing: run.spacing,
        limit_dt,
        min_reduced_cost: min_rc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrectionTrial {
    pub repetition: usize,
    pub seed: u64,
    pub w_on: f64,
    pub w_off: f64,
}

/// Paired comparison at the smallest mass: each repetition uses seed
/// `seed + repetition` for the wave and both limit runs.
pub fn correction_trials(cfg: &ExperimentConfig) -> Result<Vec<CorrectionTrial>> {
    let model = cfg.model()?;
    let n_fine = finest_substeps(cfg);
    let noise_dt = cfg.integrator.dt / n_fine as f64;
    let base = stationary_run(cfg, &model, noise_dt)?;
    let mu = cfg.mu_min();
    let dtw = wave_dt(cfg, mu, n_fine);
    (0..cfg.run.repetitions)
        .map(|rep| {
            let seed = cfg.seed.wrapping_add(rep as u64);
            let mut run = base.clone();
            run.seed = seed;
            run.initial_u = Some(initial_field(&model, &cfg.run)?);
            let ((on, _), off) = limit_samples(cfg, &model, &run, dtw)?;
            let wave = ergodic::sample_stationary_wave(&model, mu, &cfg.step().with_dt(dtw), &run)?;
            let (w_on, _) = certified_w1(&wave.u, &on, -1.0)?;
            let (w_off, _) = certified_w1(&wave.u, &off, -1.0)?;
            Ok(CorrectionTrial { repetition: rep, seed, w_on, w_off })
        })
        .collect()
}

/// Ranks with ties averaged.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let mx = rx.iter().sum::<f64>() / rx.len() as f64;
    let my = ry.iter().sum::<f64>() / ry.len() as f64;
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentTrend {
    pub ratio: f64,
    /// Slope of the energy moment against `log mu` and its 95% interval.
    pub slope: f64,
    pub slope_low: f64,
    pub slope_high: f64,
    pub spearman: f64,
}

/// Spread and trend of the invariant energy moments across masses. The
/// interval propagates the replica standard errors through the weighted
/// least-squares slope.
pub fn moment_trend(points: &[TransportPoint]) -> MomentTrend {
    let e: Vec<f64> = points.iter().map(|p| p.moments.energy.mean).collect();
    let max = e.iter().copied().fold(f64::MIN, f64::max);
    let min = e.iter().copied().fold(f64::MAX, f64::min);
    let x: Vec<f64> = points.iter().map(|p| p.mu.ln()).collect();
    let (slope, _) = linear_fit(&x, &e);
    let mx = x.iter().sum::<f64>() / x.len() as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let var: f64 = points.iter().zip(&x).map(|(p, xi)| ((xi - mx) / sxx).powi(2) * p.moments.energy.se.powi(2)).sum();
    let half = 1.96 * var.sqrt();
    MomentTrend {
        ratio: max / min,
        slope,
        slope_low: slope - half,
        slope_high: slope + half,
        spearman: spearman(&x, &e),
    }
}
