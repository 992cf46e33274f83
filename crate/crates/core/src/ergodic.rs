//! Stationary sampling, invariant moments and contraction rates.
//!
//! Replicas run in parallel on the rayon pool. Replica `k` always draws its
//! noise from `derive_stream(seed, label, k)`, so results do not depend on the
//! number of threads, and two runs sharing `(seed, label)` see the same
//! Brownian paths (common random numbers).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Domain, Field, SobolevIndex};
use crate::integrators::{ParabolicState, RhoStepper, StepConfig, Stepper, UStepper, WaveState, WaveStepper};
use crate::model::ModelSpec;
use crate::noise::{derive_stream, NoiseStream};
use crate::transport::{EmpiricalMeasure, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    /// Independent replicas, each sampled after the burn-in at spacing `spacing`.
    #[default]
    Ensemble,
    /// Each replica contributes states at uniformly random times of one path.
    Cesaro,
}

/// Which of the two equivalent limit equations to integrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LimitForm {
    Rho,
    U,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryRunConfig {
    pub burn_in: f64,
    pub spacing: f64,
    pub replicas: usize,
    pub samples_per_replica: usize,
    pub mode: EstimatorMode,
    pub seed: u64,
    /// Stream label; runs sharing it are driven by the same noise.
    pub label: String,
    /// Resolution of the Brownian paths. Every step size must be a multiple of it.
    pub noise_dt: f64,
    /// Initial `u` (zero when absent). Limit runs in rho-form start from `g(u)`.
    pub initial_u: Option<Field>,
    pub initial_v: Option<Field>,
}

impl StationaryRunConfig {
    pub fn new(burn_in: f64, spacing: f64, replicas: usize, samples_per_replica: usize, noise_dt: f64) -> Result<Self> {
        let cfg = Self {
            burn_in,
            spacing,
            replicas,
            samples_per_replica,
            mode: EstimatorMode::Ensemble,
            seed: 0,
            label: "stationary".into(),
            noise_dt,
            initial_u: None,
            initial_v: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Burn-in `20 / lambda` and spacing `5 / lambda` from a pilot rate.
    pub fn from_pilot(lambda: f64, replicas: usize, samples_per_replica: usize, noise_dt: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("pilot rate must be positive, got {lambda}")));
        }
        Self::new(20.0 / lambda, 5.0 / lambda, replicas, samples_per_replica, noise_dt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.burn_in >= 0.0) || !(self.spacing > 0.0) {
            return Err(Error::InvalidParameter("need burn_in >= 0 and spacing > 0".into()));
        }
        if self.replicas == 0 || self.samples_per_replica == 0 {
            return Err(Error::InvalidParameter("need at least one replica and one sample".into()));
        }
        if !(self.noise_dt > 0.0) {
            return Err(Error::InvalidParameter("noise resolution must be positive".into()));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.replicas * self.samples_per_replica
    }

    fn record_steps(&self, dt: f64, replica: usize) -> Vec<usize> {
        let k = self.samples_per_replica;
        match self.mode {
            EstimatorMode::Ensemble => {
                let nb = (self.burn_in / dt).round() as usize;
                let ns = ((self.spacing / dt).round() as usize).max(1);
                (0..k).map(|i| nb + i * ns).collect()
            }
            EstimatorMode::Cesaro => {
                let horizon = self.burn_in + k as f64 * self.spacing;
                cesaro_steps(horizon, dt, k, self.seed ^ (replica as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
            }
        }
    }

    fn stream(&self, replica: usize, modes: usize) -> NoiseStream {
        derive_stream(self.seed, &self.label, replica as u64, modes)
    }
}

/// Number of noise increments per step of size `dt`.
pub fn noise_ratio(dt: f64, noise_dt: f64) -> Result<usize> {
    let r = (dt / noise_dt).round();
    if r < 1.0 || (r * noise_dt - dt).abs() > 1e-9 * dt {
        return Err(Error::InvalidParameter(format!("step {dt} is not a multiple of the noise resolution {noise_dt}")));
    }
    Ok(r as usize)
}

fn cesaro_steps(horizon: f64, dt: f64, m: usize, seed: u64) -> Vec<usize> {
    let n = (horizon / dt).round();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps: Vec<usize> = (0..m).map(|_| (rng.gen::<f64>() * n).round() as usize).collect();
    steps.sort_unstable();
    steps
}

/// Advance one path and call `record` at each (sorted) step index in `at`;
/// index 0 is the initial state and repeated indices record repeatedly.
fn sample_path<S: Stepper>(
    stepper: &mut S,
    state: &mut S::State,
    stream: &mut NoiseStream,
    noise_substeps: usize,
    at: &[usize],
    mut record: impl FnMut(&S::State),
) -> Result<()> {
    let dt = stepper.dt();
    let fine = dt / noise_substeps as f64;
    let mut dw = vec![0.0; stream.modes()];
    let mut k = 0;
    for &target in at {
        while k < target {
            stream.increment_into(fine, noise_substeps, &mut dw);
            k += 1;
            stepper.step(state, &dw).map_err(|e| Error::Step { step: k, source: Box::new(e) })?;
        }
        record(state);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Standard error over replica blocks; NaN with fewer than two blocks.
    pub se: f64,
}

impl Estimate {
    fn from_blocks(values: &[f64], blocks: &[usize]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let mut ids: Vec<usize> = blocks.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Self { mean, se: f64::NAN };
        }
        let block_means: Vec<f64> = ids
            .iter()
            .map(|&b| {
                let (s, c) = values
                    .iter()
                    .zip(blocks)
                    .filter(|(_, &k)| k == b)
                    .fold((0.0, 0.0), |(s, c), (v, _)| (s + v, c + 1.0));
                s / c
            })
            .collect();
        let nb = block_means.len() as f64;
        let bm = block_means.iter().sum::<f64>() / nb;
        let var = block_means.iter().map(|x| (x - bm).powi(2)).sum::<f64>() / (nb - 1.0);
        Self { mean, se: (var / nb).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub mu: Option<f64>,
    pub samples: usize,
    pub blocks: usize,
    /// `int |u|^2_{H^1}`.
    pub h1: Estimate,
    /// `mu int |v|^2_H`, present with a velocity companion.
    pub kinetic: Option<Estimate>,
    /// `int |u|^2_H`.
    pub l2: Estimate,
    /// `int |r|^2_{H^-1}`.
    pub h_minus1: Estimate,
    /// `int (|u|^2_{H^1} + mu |v|^2_H)`.
    pub energy: Estimate,
    /// Lag-one autocorrelation of the energy along each replica, pooled.
    pub lag_autocorrelation: Option<f64>,
}

/// Plug-in moments of `measure` (and of `mu |v|^2` for a velocity companion
/// with the same sample layout).
pub fn moment_estimate(
    measure: &EmpiricalMeasure,
    mu: Option<f64>,
    velocity: Option<&EmpiricalMeasure>,
) -> Result<MomentReport> {
    let dom = measure.domain();
    let blocks = measure.blocks();
    let norm = |idx: f64| -> Vec<f64> {
        measure.samples().iter().map(|s| dom.sobolev_norm_sq(s, SobolevIndex(idx))).collect()
    };
    let h1 = norm(1.0);
    let kin = match velocity {
        Some(v) => {
            if v.len() != measure.len() {
                return Err(Error::LengthMismatch { expected: measure.len(), got: v.len() });
            }
            let m = mu.ok_or_else(|| Error::InvalidParameter("kinetic moments need mu".into()))?;
            Some(v.samples().iter().map(|s| m * dom.inner(s, s)).collect::<Vec<f64>>())
        }
        None => None,
    };
    let energy: Vec<f64> = match &kin {
        Some(k) => h1.iter().zip(k).map(|(a, b)| a + b).collect(),
        None => h1.clone(),
    };
    let mut distinct = blocks.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(MomentReport {
        mu,
        samples: measure.len(),
        blocks: distinct.len(),
        h1: Estimate::from_blocks(&h1, blocks),
        kinetic: kin.as_ref().map(|k| Estimate::from_blocks(k, blocks)),
        l2: Estimate::from_blocks(&norm(0.0), blocks),
        h_minus1: Estimate::from_blocks(&norm(-1.0), blocks),
        lag_autocorrelation: lag_autocorrelation(&energy, blocks),
        energy: Estimate::from_blocks(&energy, blocks),
    })
}

fn lag_autocorrelation(x: &[f64], blocks: &[usize]) -> Option<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mut num = 0.0;
    let mut pairs = 0usize;
    for k in 1..x.len() {
        if blocks[k] == blocks[k - 1] {
            num += (x[k] - mean) * (x[k - 1] - mean);
            pairs += 1;
        }
    }
    (pairs > 0 && var > 0.0).then(|| num / pairs as f64 / var)
}

pub struct WaveSamples {
    pub u: EmpiricalMeasure,
    pub v: EmpiricalMeasure,
    pub moments: MomentReport,
}

fn initial_u(model: &ModelSpec, run: &StationaryRunConfig) -> Result<Field> {
    let u = run.initial_u.clone().unwrap_or_else(|| model.domain().zeros());
    model.domain().check(&u)?;
    Ok(u)
}

/// Stationary samples of the wave system with mass `mu`, stepped with `step.dt`.
pub fn sample_stationary_wave(
    model: &ModelSpec,
    mu: f64,
    step: &StepConfig,
    run: &StationaryRunConfig,
) -> Result<WaveSamples> {
    run.validate()?;
    let substeps = noise_ratio(step.dt, run.noise_dt)?;
    let u0 = initial_u(model, run)?;
    let v0 = run.initial_v.clone().unwrap_or_else(|| model.domain().zeros());
    let start = WaveState::new(u0, v0, mu)?;
    let per_replica: Vec<Vec<(Field, Field)>> = (0..run.replicas)
        .into_par_iter()
        .map(|r| {
            let mut stepper = WaveStepper::new(model, step.dt);
            let mut state = start.clone();
            let mut stream = run.stream(r, model.noise_modes());
            let mut out = Vec::with_capacity(run.samples_per_replica);
            sample_path(&mut stepper, &mut state, &mut stream, substeps, &run.record_steps(step.dt, r), |s| {
                out.push((s.u.clone(), s.v.clone()))
            })?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let blocks = block_ids(run);
    let (us, vs): (Vec<Field>, Vec<Field>) = per_replica.into_iter().flatten().unzip();
    let prov = Provenance {
        label: run.label.clone(),
        model_hash: String::new(),
        mu: Some(mu),
        burn_in: run.burn_in,
        seed: run.seed,
    };
    let u = EmpiricalMeasure::with_blocks(model.domain(), us, blocks.clone())?.with_provenance(prov.clone());
    let v = EmpiricalMeasure::with_blocks(model.domain(), vs, blocks)?.with_provenance(prov);
    let moments = moment_estimate(&u, Some(mu), Some(&v))?;
    Ok(WaveSamples { u, v, moments })
}

fn block_ids(run: &StationaryRunConfig) -> Vec<usize> {
    (0..run.replicas).flat_map(|r| std::iter::repeat_n(r, run.samples_per_replica)).collect()
}

/// Stationary samples of a limit equation. Samples are `rho` for
/// [`LimitForm::Rho`] and `u` for [`LimitForm::U`].
pub fn sample_stationary_parabolic(
    model: &ModelSpec,
    form: LimitForm,
    step: &StepConfig,
    run: &StationaryRunConfig,
) -> Result<(EmpiricalMeasure, MomentReport)> {
    run.validate()?;
    let substeps = noise_ratio(step.dt, run.noise_dt)?;
    let u0 = initial_u(model, run)?;
    let w0 = match form {
        LimitForm::Rho => model.g_field(&u0),
        LimitForm::U => u0,
    };
    let per_replica: Vec<Vec<Field>> = (0..run.replicas)
        .into_par_iter()
        .map(|r| {
            let mut state = ParabolicState::new(w0.clone());
            let mut stream = run.stream(r, model.noise_modes());
            let at = run.record_steps(step.dt, r);
            let mut out = Vec::with_capacity(run.samples_per_replica);
            let record = |s: &ParabolicState| out.push(s.w.clone());
            match form {
                LimitForm::Rho => {
                    sample_path(&mut RhoStepper::new(model, *step), &mut state, &mut stream, substeps, &at, record)?
                }
                LimitForm::U => {
                    sample_path(&mut UStepper::new(model, *step), &mut state, &mut stream, substeps, &at, record)?
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<Field> = per_replica.into_iter().flatten().collect();
    let prov = Provenance {
        label: run.label.clone(),
        model_hash: String::new(),
        mu: None,
        burn_in: run.burn_in,
        seed: run.seed,
    };
    let m = EmpiricalMeasure::with_blocks(model.domain(), samples, block_ids(run))?.with_provenance(prov);
    let moments = moment_estimate(&m, None, None)?;
    Ok((m, moments))
}

/// Occupation-measure sample: `m` states at uniformly random times in
/// `[0, horizon]` of a single path, drawn with a ChaCha8 generator seeded by `seed`.
pub fn cesaro_measure<S: Stepper>(
    stepper: &mut S,
    mut state: S::State,
    stream: &mut NoiseStream,
    dom: &Domain,
    horizon: f64,
    m: usize,
    seed: u64,
    extract: impl Fn(&S::State) -> Field,
) -> Result<EmpiricalMeasure> {
    if !(horizon > 0.0) || m == 0 {
        return Err(Error::InvalidParameter("need a positive horizon and at least one sample".into()));
    }
    let at = cesaro_steps(horizon, stepper.dt(), m, seed);
    let mut out = Vec::with_capacity(m);
    sample_path(stepper, &mut state, stream, 1, &at, |s| out.push(extract(s)))?;
    EmpiricalMeasure::with_blocks(dom, out, vec![0; m])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub times: Vec<f64>,
    /// Replica mean of `|rho^1(t) - rho^2(t)|^2_{H^-1}`.
    pub mean_gap: Vec<f64>,
    pub lambda: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Number of grid points used in the fit.
    pub window: usize,
    /// `|r1 - r2|^2_{H^-1}`, which `mean_gap[0]` must reproduce.
    pub initial_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionConfig {
    pub horizon: f64,
    pub observe_every: usize,
    pub replicas: usize,
    pub seed: u64,
    pub label: String,
}

/// Replica-mean squared H^-1 gap between two synchronously coupled limit
/// solutions started at `r1` and `r2` (both in rho variables), observed on
/// the grid `k * observe_every * dt`, starting at `t = 0`.
pub fn coupled_gaps(
    model: &ModelSpec,
    form: LimitForm,
    r1: &Field,
    r2: &Field,
    step: &StepConfig,
    cfg: &ContractionConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let dom = model.domain();
    dom.check(r1)?;
    dom.check(r2)?;
    if cfg.replicas == 0 || cfg.observe_every == 0 {
        return Err(Error::InvalidParameter("need replicas >= 1 and observe_every >= 1".into()));
    }
    let n = crate::integrators::step_count(cfg.horizon, step.dt)?;
    let at: Vec<usize> = (0..=n / cfg.observe_every).map(|k| k * cfg.observe_every).collect();
    let start = |r: &Field| -> Result<Field> {
        match form {
            LimitForm::Rho => Ok(r.clone()),
            LimitForm::U => model.g_inverse_field(r),
        }
    };
    let (w1, w2) = (start(r1)?, start(r2)?);
    let gap = |a: &Field, b: &Field| -> f64 {
        match form {
            LimitForm::Rho => dom.sobolev_norm_sq(&a.sub(b), SobolevIndex::H_MINUS_1),
            LimitForm::U => dom.sobolev_norm_sq(&model.g_field(a).sub(&model.g_field(b)), SobolevIndex::H_MINUS_1),
        }
    };
    let per_replica: Vec<Vec<f64>> = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let (mut s1, mut s2) = derive_stream(cfg.seed, &cfg.label, r as u64, model.noise_modes()).fork_coupled();
            let mut a = Vec::with_capacity(at.len());
            let mut b = Vec::with_capacity(at.len());
            let mut x = ParabolicState::new(w1.clone());
            let mut y = ParabolicState::new(w2.clone());
            match form {
                LimitForm::Rho => {
                    sample_path(&mut RhoStepper::new(model, *step), &mut x, &mut s1, 1, &at, |s| a.push(s.w.clone()))?;
                    sample_path(&mut RhoStepper::new(model, *step), &mut y, &mut s2, 1, &at, |s| b.push(s.w.clone()))?;
                }
                LimitForm::U => {
                    sample_path(&mut UStepper::new(model, *step), &mut x, &mut s1, 1, &at, |s| a.push(s.w.clone()))?;
                    sample_path(&mut UStepper::new(model, *step), &mut y, &mut s2, 1, &at, |s| b.push(s.w.clone()))?;
                }
            }
            Ok(a.iter().zip(&b).map(|(p, q)| gap(p, q)).collect())
        })
        .collect::<Result<_>>()?;
    let times: Vec<f64> = at.iter().map(|&k| k as f64 * step.dt).collect();
    let mean: Vec<f64> =
        (0..at.len()).map(|i| per_replica.iter().map(|g| g[i]).sum::<f64>() / cfg.replicas as f64).collect();
    Ok((times, mean))
}

/// Least-squares fit of `log gap = intercept - lambda t` over the points
/// where the gap exceeds ten times the rounding floor `eps^2 max(gap(0), 1)`.
pub fn fit_rate(times: &[f64], gaps: &[f64]) -> Result<(f64, f64, f64, usize)> {
    let g0 = gaps.first().copied().unwrap_or(0.0);
    let floor = f64::EPSILON.powi(2) * g0.max(1.0);
    let pts: Vec<(f64, f64)> =
        times.iter().zip(gaps).take_while(|(_, &g)| g > 10.0 * floor).map(|(&t, &g)| (t, g.ln())).collect();
    if pts.len() < 3 {
        return Err(Error::DegenerateFit(format!("only {} points above the rounding floor", pts.len())));
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if stt == 0.0 {
        return Err(Error::DegenerateFit("all fit times coincide".into()));
    }
    let slope = sty / stt;
    let intercept = my - slope * mt;
    let r2 = if syy == 0.0 { 1.0 } else { sty * sty / (stt * syy) };
    Ok((-slope, intercept, r2, pts.len()))
}

/// Coupled gaps plus the exponential fit.
pub fn contraction_estimate(
    model: &ModelSpec,
    form: LimitForm,
    r1: &Field,
    r2: &Field,
    step: &StepConfig,
    cfg: &ContractionConfig,
) -> Result<ContractionReport> {
    if r1 == r2 {
        return Err(Error::InvalidParameter("contraction needs distinct initial data".into()));
    }
    let (times, mean_gap) = coupled_gaps(model, form, r1, r2, step, cfg)?;
    let (lambda, intercept, r_squared, window) = fit_rate(&times, &mean_gap)?;
    let initial_gap = model.domain().sobolev_norm_sq(&r1.sub(r2), SobolevIndex::H_MINUS_1);
    Ok(ContractionReport { times, mean_gap, lambda, intercept, r_squared, window, initial_gap })
}

/// Cheap pilot rate for burn-in calibration: rho-form, 4 replicas, horizon 5,
/// started from `0` and `g(e_1)`.
pub fn pilot_rate(model: &ModelSpec, step: &StepConfig, seed: u64) -> Result<f64> {
    let dom = model.domain();
    let r2 = model.g_field(&dom.mode(1)?);
    let cfg = ContractionConfig {
        horizon: 5.0,
        observe_every: ((0.05 / step.dt).round() as usize).max(1),
        replicas: 4,
        seed,
        label: "pilot".into(),
    };
    Ok(contraction_estimate(model, LimitForm::Rho, &dom.zeros(), &r2, step, &cfg)?.lambda)
}
