//! Linearly implicit time steppers.
//!
//! * [`WaveStepper`]: the second-order system in `(u, v)`, implicit in the
//!   Laplacian and the friction, explicit in the reaction and the noise.
//!   The system matrix stays SPD at `mu = 0`, where the step becomes an
//!   implicit step of `gamma(u) du = (Delta u + F(u)) dt + sigma(u) dW`.
//! * [`RhoStepper`]: the divergence form `d rho = div(b(rho) grad rho) + f_g + sigma_g dW`,
//!   with an optional exact spectral damping sub-step for `-eps Delta^2`.
//! * [`UStepper`]: the quasilinear form in `u`, including the noise-induced
//!   correction drift (switchable for comparison runs).
//!
//! Coefficients are frozen at the start of each step and the noise enters
//! as an Euler-Maruyama increment.

use crate::error::{Error, Result};
use crate::grid::{Domain, Field, SobolevIndex, Tridiagonal};
use crate::model::ModelSpec;
use crate::noise::NoiseStream;

#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub u: Field,
    pub v: Field,
    pub t: f64,
    pub mu: f64,
}

impl WaveState {
    pub fn new(u: Field, v: Field, mu: f64) -> Result<Self> {
        if !(mu >= 0.0 && mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("mass must be nonnegative, got {mu}")));
        }
        if u.len() != v.len() {
            return Err(Error::LengthMismatch { expected: u.len(), got: v.len() });
        }
        Ok(Self { u, v, t: 0.0, mu })
    }

    pub fn at_rest(dom: &Domain, mu: f64) -> Result<Self> {
        Self::new(dom.zeros(), dom.zeros(), mu)
    }
}

/// State of either limit form: `w` is `rho` for [`RhoStepper`] and `u` for [`UStepper`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParabolicState {
    pub w: Field,
    pub t: f64,
}

impl ParabolicState {
    pub fn new(w: Field) -> Self {
        Self { w, t: 0.0 }
    }
}

/// `(u, eta)` with `eta = sqrt(mu) v + g(u) / sqrt(mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedState {
    pub u: Field,
    pub eta: Field,
    pub mu: f64,
}

/// Treatment of the noise-induced drift in the u-form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Correction {
    /// No correction: the equation one gets by formally dropping the inertia.
    Off,
    /// `dt * gamma'/(2 gamma^2) * sum_i |sigma_i|^2`, the Ito correction drift.
    #[default]
    Drift,
    /// `gamma'/(2 gamma^2) * |sigma dW|^2`: the same term with the expected
    /// quadratic variation replaced by the realized one. It has the same mean
    /// as [`Correction::Drift`] and makes the u-form step the exact second-order
    /// chain rule image of the rho-form step.
    Pathwise,
}

/// How the diffusivity `b` is evaluated on the cell faces of the flux form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FaceRule {
    /// `(B(rho_r) - B(rho_l)) / (rho_r - rho_l)`: the flux equals `Delta_h B(rho)` exactly.
    #[default]
    Secant,
    /// `b((rho_l + rho_r) / 2)`.
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConfig {
    pub dt: f64,
    /// Weight of the biharmonic regularization; zero disables it.
    pub epsilon: f64,
    pub correction: Correction,
    pub face_rule: FaceRule,
}

impl StepConfig {
    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { dt, epsilon: 0.0, correction: Correction::Drift, face_rule: FaceRule::default() })
    }

    pub fn with_dt(self, dt: f64) -> Self {
        Self { dt, ..self }
    }
}

/// Number of wave sub-steps per limit step so that the wave step is at most
/// `mu / resolution`.
pub fn wave_substeps(dt: f64, mu: f64, resolution: f64) -> usize {
    if resolution <= 0.0 || mu <= 0.0 {
        return 1;
    }
    ((resolution * dt / mu) * (1.0 - 1e-12)).ceil().max(1.0) as usize
}

/// A state transformer driven by per-mode Brownian increments.
pub trait Stepper {
    type State;
    fn dt(&self) -> f64;
    fn step(&mut self, state: &mut Self::State, dw: &[f64]) -> Result<()>;
}

struct Scratch {
    diag: Vec<f64>,
    sub: Vec<f64>,
    sup: Vec<f64>,
    rhs: Vec<f64>,
    out: Vec<f64>,
    noise: Vec<f64>,
    reaction: Vec<f64>,
    solver: Tridiagonal,
}

impl Scratch {
    fn new(m: usize) -> Self {
        Self {
            diag: vec![0.0; m],
            sub: vec![0.0; m - 1],
            sup: vec![0.0; m - 1],
            rhs: vec![0.0; m],
            out: vec![0.0; m],
            noise: vec![0.0; m],
            reaction: vec![0.0; m],
            solver: Tridiagonal::new(m),
        }
    }

    fn solve(&mut self) -> Result<()> {
        self.solver.solve(&self.diag, &self.sub, &self.sup, &self.rhs, &mut self.out)
    }
}

pub struct WaveStepper {
    model: ModelSpec,
    dt: f64,
    scratch: Scratch,
}

impl WaveStepper {
    pub fn new(model: &ModelSpec, dt: f64) -> Self {
        Self { model: model.clone(), dt, scratch: Scratch::new(model.domain().points()) }
    }
}

impl Stepper for WaveStepper {
    type State = WaveState;

    fn dt(&self) -> f64 {
        self.dt
    }

    fn step(&mut self, state: &mut WaveState, dw: &[f64]) -> Result<()> {
        let dt = self.dt;
        let mu = state.mu;
        let model = &self.model;
        let h = model.domain().spacing();
        let c = dt / (h * h);
        let friction = model.friction();
        let amp = &model.diffusion().amplitude;
        let sc = &mut self.scratch;
        model.noise_into(dw, &mut sc.noise);
        model.reaction_into(state.u.as_slice(), &mut sc.reaction);
        let inertia = mu / dt;
        for (j, (&u, &v)) in state.u.0.iter().zip(&state.v.0).enumerate() {
            let gam = friction.gamma(u);
            sc.diag[j] = inertia + gam + 2.0 * c;
            sc.rhs[j] = inertia * u + mu * v + gam * u + dt * sc.reaction[j] + amp.value(u) * sc.noise[j];
        }
        sc.sub.iter_mut().for_each(|x| *x = -c);
        sc.sup.iter_mut().for_each(|x| *x = -c);
        sc.solve()?;
        for ((u, v), &un) in state.u.0.iter_mut().zip(state.v.0.iter_mut()).zip(&sc.out) {
            *v = (un - *u) / dt;
            *u = un;
        }
        state.t += dt;
        Ok(())
    }
}

pub struct RhoStepper {
    model: ModelSpec,
    cfg: StepConfig,
    scratch: Scratch,
    /// `B(rho_j) = g^{-1}(rho_j)` from the previous step, used as Newton guesses.
    big_b: Vec<f64>,
    faces: Vec<f64>,
    damping: Option<Vec<f64>>,
    coeffs: Vec<f64>,
}

impl RhoStepper {
    pub fn new(model: &ModelSpec, cfg: StepConfig) -> Self {
        let m = model.domain().points();
        let damping = (cfg.epsilon > 0.0)
            .then(|| model.domain().eigenvalues().iter().map(|a| (-cfg.epsilon * a * a * cfg.dt).exp()).collect());
        Self {
            model: model.clone(),
            cfg,
            scratch: Scratch::new(m),
            big_b: vec![0.0; m],
            faces: vec![0.0; m + 1],
            damping,
            coeffs: vec![0.0; m],
        }
    }

    /// Per-mode factors of the regularization sub-step (all ones when `eps = 0`).
    pub fn damping_factors(&self) -> Vec<f64> {
        self.damping.clone().unwrap_or_else(|| vec![1.0; self.model.domain().points()])
    }

    fn face_values(&mut self, rho: &[f64]) -> Result<()> {
        let m = rho.len();
        let friction = self.model.friction();
        for k in 0..=m {
            let (rl, bl) = if k == 0 { (0.0, 0.0) } else { (rho[k - 1], self.big_b[k - 1]) };
            let (rr, br) = if k == m { (0.0, 0.0) } else { (rho[k], self.big_b[k]) };
            self.faces[k] = match self.cfg.face_rule {
                FaceRule::Secant => {
                    let d = rr - rl;
                    if d.abs() > 1e-9 * (1.0 + rl.abs().max(rr.abs())) {
                        (br - bl) / d
                    } else {
                        1.0 / friction.gamma(0.5 * (bl + br))
                    }
                }
                FaceRule::Midpoint => {
                    let mid = friction.g_inverse_near(0.5 * (rl + rr), 0.5 * (bl + br))?;
                    1.0 / friction.gamma(mid)
                }
            };
        }
        Ok(())
    }
}

impl Stepper for RhoStepper {
    type State = ParabolicState;

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn step(&mut self, state: &mut ParabolicState, dw: &[f64]) -> Result<()> {
        let dt = self.cfg.dt;
        let h = self.model.domain().spacing();
        let c = dt / (h * h);
        let rho = state.w.as_slice();
        {
            let friction = self.model.friction();
            for (b, &y) in self.big_b.iter_mut().zip(rho) {
                *b = friction.g_inverse_near(y, *b)?;
            }
        }
        self.face_values(rho)?;
        let model = &self.model;
        let sc = &mut self.scratch;
        model.noise_into(dw, &mut sc.noise);
        model.reaction_into(&self.big_b, &mut sc.reaction);
        let amp = &model.diffusion().amplitude;
        let m = rho.len();
        for j in 0..m {
            let (bl, br) = (self.faces[j], self.faces[j + 1]);
            sc.diag[j] = 1.0 + c * (bl + br);
            if j > 0 {
                sc.sub[j - 1] = -c * bl;
            }
            if j + 1 < m {
                sc.sup[j] = -c * br;
            }
            sc.rhs[j] = rho[j] + dt * sc.reaction[j] + amp.value(self.big_b[j]) * sc.noise[j];
        }
        sc.solve()?;
        if let Some(damp) = &self.damping {
            let dom = model.domain();
            dom.dst_forward_into(&sc.out, &mut self.coeffs);
            for (c, d) in self.coeffs.iter_mut().zip(damp) {
                *c *= d;
            }
            dom.dst_inverse_into(&self.coeffs, &mut sc.out);
        }
        state.w.0.copy_from_slice(&sc.out);
        state.t += dt;
        Ok(())
    }
}

pub struct UStepper {
    model: ModelSpec,
    cfg: StepConfig,
    scratch: Scratch,
}

impl UStepper {
    pub fn new(model: &ModelSpec, cfg: StepConfig) -> Self {
        Self { model: model.clone(), cfg, scratch: Scratch::new(model.domain().points()) }
    }
}

impl Stepper for UStepper {
    type State = ParabolicState;

    fn dt(&self) -> f64 {
        self.cfg.dt
    }

    fn step(&mut self, state: &mut ParabolicState, dw: &[f64]) -> Result<()> {
        let dt = self.cfg.dt;
        let model = &self.model;
        let h = model.domain().spacing();
        let c = dt / (h * h);
        let friction = model.friction();
        let amp = &model.diffusion().amplitude;
        let sc = &mut self.scratch;
        model.noise_into(dw, &mut sc.noise);
        model.reaction_into(state.w.as_slice(), &mut sc.reaction);
        let mode_sum = model.mode_sum();
        for (j, &u) in state.w.0.iter().enumerate() {
            let gam = friction.gamma(u);
            let kick = amp.value(u) * sc.noise[j];
            let corr = match self.cfg.correction {
                Correction::Off => 0.0,
                Correction::Drift => dt * model.correction_at(u, mode_sum[j]),
                Correction::Pathwise => model.correction_at(u, sc.noise[j] * sc.noise[j]),
            };
            sc.diag[j] = gam + 2.0 * c;
            sc.rhs[j] = gam * u + dt * sc.reaction[j] - corr + kick;
        }
        sc.sub.iter_mut().for_each(|x| *x = -c);
        sc.sup.iter_mut().for_each(|x| *x = -c);
        sc.solve()?;
        state.w.0.copy_from_slice(&sc.out);
        state.t += dt;
        Ok(())
    }
}

pub fn wave_step(state: &WaveState, model: &ModelSpec, cfg: &StepConfig, dw: &[f64]) -> Result<WaveState> {
    let mut next = state.clone();
    WaveStepper::new(model, cfg.dt).step(&mut next, dw)?;
    Ok(next)
}

pub fn parabolic_step_rho(
    state: &ParabolicState,
    model: &ModelSpec,
    cfg: &StepConfig,
    dw: &[f64],
) -> Result<ParabolicState> {
    let mut next = state.clone();
    RhoStepper::new(model, *cfg).step(&mut next, dw)?;
    Ok(next)
}

pub fn parabolic_step_u(
    state: &ParabolicState,
    model: &ModelSpec,
    cfg: &StepConfig,
    dw: &[f64],
) -> Result<ParabolicState> {
    let mut next = state.clone();
    UStepper::new(model, *cfg).step(&mut next, dw)?;
    Ok(next)
}

/// Number of whole steps of size `dt` covering `horizon`.
pub fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(horizon > 0.0) {
        return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) || n < 1.0 {
        return Err(Error::InvalidParameter(format!("horizon {horizon} is not a multiple of dt = {dt}")));
    }
    Ok(n as usize)
}

/// Drive `stepper` over `[0, horizon]`, drawing each increment as the sum of
/// `noise_substeps` fine increments, and call `observer(k, state)` after
/// every step `k` divisible by `observe_every` (`0` disables observation).
pub fn simulate<S: Stepper>(
    stepper: &mut S,
    state: &mut S::State,
    stream: &mut NoiseStream,
    horizon: f64,
    noise_substeps: usize,
    observe_every: usize,
    mut observer: impl FnMut(usize, &S::State),
) -> Result<usize> {
    let dt = stepper.dt();
    let steps = step_count(horizon, dt)?;
    let substeps = noise_substeps.max(1);
    let fine_dt = dt / substeps as f64;
    let mut dw = vec![0.0; stream.modes()];
    for k in 1..=steps {
        stream.increment_into(fine_dt, substeps, &mut dw);
        stepper.step(state, &dw).map_err(|e| Error::Step { step: k, source: Box::new(e) })?;
        if observe_every > 0 && k % observe_every == 0 {
            observer(k, state);
        }
    }
    Ok(steps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyReport {
    pub h1_sq: f64,
    pub kinetic: f64,
    pub l2_sq: f64,
    pub phi: f64,
    pub psi: f64,
    /// `|u|_H^2 + |eta|_{H^-1}^2`; undefined at `mu = 0`.
    pub zeta_sq: Option<f64>,
}

pub fn energy_report(state: &WaveState, model: &ModelSpec) -> EnergyReport {
    let dom = model.domain();
    let lyap = model.lyapunov_values(&state.u, &state.v, state.mu);
    let zeta_sq = to_transformed(state, model)
        .ok()
        .map(|z| dom.inner(&z.u, &z.u) + dom.sobolev_norm_sq(&z.eta, SobolevIndex::H_MINUS_1));
    EnergyReport {
        h1_sq: dom.sobolev_norm_sq(&state.u, SobolevIndex::H1),
        kinetic: state.mu * dom.inner(&state.v, &state.v),
        l2_sq: dom.inner(&state.u, &state.u),
        phi: lyap.phi,
        psi: lyap.psi,
        zeta_sq,
    }
}

pub fn to_transformed(state: &WaveState, model: &ModelSpec) -> Result<TransformedState> {
    let mu = state.mu;
    if !(mu > 0.0) {
        return Err(Error::InvalidParameter("the transformed variables need mu > 0".into()));
    }
    let sq = mu.sqrt();
    let eta = Field(state.u.0.iter().zip(&state.v.0).map(|(&u, &v)| sq * v + model.g_eval(u) / sq).collect());
    Ok(TransformedState { u: state.u.clone(), eta, mu })
}

pub fn to_wave(z: &TransformedState, model: &ModelSpec) -> WaveState {
    let sq = z.mu.sqrt();
    let v = Field(z.u.0.iter().zip(&z.eta.0).map(|(&u, &e)| e / sq - model.g_eval(u) / z.mu).collect());
    WaveState { u: z.u.clone(), v, t: 0.0, mu: z.mu }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::{model, rational};
    use crate::model::{ConstantFriction, RationalFriction};
    use crate::noise::derive_stream;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quiet(m: usize) -> ModelSpec {
        model(m, ConstantFriction(1.0), 0.0, 0.0, 0.0, 0.0, 4)
    }

    /// Closed form of `u'' + u' + a u = 0`, `u(0) = 1`, `u'(0) = 0`, for `a > 1/4`.
    fn damped_oscillator(a: f64, t: f64) -> (f64, f64) {
        let w = (a - 0.25).sqrt();
        let e = (-0.5 * t).exp();
        let u = e * ((w * t).cos() + 0.5 / w * (w * t).sin());
        let v = -e * (a / w) * (w * t).sin();
        (u, v)
    }

    fn run_wave_mode(dt: f64) -> (f64, f64, f64) {
        let m = quiet(31);
        let dom = m.domain().clone();
        let mut s = WaveState::new(dom.mode(1).unwrap(), dom.zeros(), 1.0).unwrap();
        let mut st = WaveStepper::new(&m, dt);
        let n = step_count(1.0, dt).unwrap();
        for _ in 0..n {
            st.step(&mut s, &[0.0; 4]).unwrap();
        }
        let cu = dom.dst_forward(&s.u).0[0];
        let cv = dom.dst_forward(&s.v).0[0];
        let (eu, ev) = damped_oscillator(dom.alpha1(), 1.0);
        (cu, cv, ((cu - eu).powi(2) + (cv - ev).powi(2)).sqrt())
    }

    #[test]
    fn wave_tracks_damped_oscillator() {
        let (_, _, e1) = run_wave_mode(1e-3);
        let (_, _, e2) = run_wave_mode(5e-4);
        assert!(e1 < dt_bound(1e-3), "error {e1}");
        let ratio = e2 / e1;
        assert!(ratio > 0.4 && ratio < 0.6, "ratio {ratio}");
    }

    fn dt_bound(dt: f64) -> f64 {
        dt
    }

    #[test]
    fn wave_equilibrium_stays_put() {
        let m = quiet(15);
        let s = WaveState::at_rest(m.domain(), 0.3).unwrap();
        let cfg = StepConfig::new(0.01).unwrap();
        let next = wave_step(&s, &m, &cfg, &[0.0; 4]).unwrap();
        assert_eq!(next.u, s.u);
        assert_eq!(next.v, s.v);
    }

    #[test]
    fn wave_at_zero_mass_is_implicit_heat_step() {
        let m = quiet(31);
        let dom = m.domain();
        let e1 = dom.mode(1).unwrap();
        let s = WaveState::new(e1.clone(), dom.zeros(), 0.0).unwrap();
        let cfg = StepConfig::new(0.05).unwrap();
        let next = wave_step(&s, &m, &cfg, &[0.0; 4]).unwrap();
        let expected = e1.scale(1.0 / (1.0 + 0.05 * dom.alpha1()));
        assert!(next.u.sub(&expected).max_abs() < 1e-13);
    }

    #[test]
    fn rho_heat_decay_per_mode() {
        let m = quiet(31);
        let dom = m.domain();
        let dt = 0.01;
        let cfg = StepConfig::new(dt).unwrap();
        let mut st = RhoStepper::new(&m, cfg);
        let mut s = ParabolicState::new(dom.mode(1).unwrap());
        st.step(&mut s, &[0.0; 4]).unwrap();
        let c = dom.dst_forward(&s.w);
        assert_abs_diff_eq!(c.0[0], 1.0 / (1.0 + dt * dom.alpha1()), epsilon = 1e-12);

        let zero = ParabolicState::new(dom.zeros());
        assert_eq!(parabolic_step_rho(&zero, &m, &cfg, &[0.0; 4]).unwrap().w, dom.zeros());
    }

    #[test]
    fn rho_amplification_is_exact_for_every_mode() {
        let m = quiet(31);
        let dom = m.domain();
        let dt = 1e-3;
        let cfg = StepConfig::new(dt).unwrap();
        let f = dom.sample(|x| x * (std::f64::consts::PI - x) * (3.0 * x).cos());
        let next = parabolic_step_rho(&ParabolicState::new(f.clone()), &m, &cfg, &[0.0; 4]).unwrap();
        let before = dom.dst_forward(&f);
        let after = dom.dst_forward(&next.w);
        for ((a, b), alpha) in after.0.iter().zip(&before.0).zip(dom.eigenvalues()) {
            assert_abs_diff_eq!(*a, b / (1.0 + dt * alpha), epsilon = 1e-12);
        }
    }

    #[test]
    fn regularized_step_composes_both_factors() {
        let m = quiet(31);
        let dom = m.domain();
        let dt = 0.01;
        let eps = 0.05;
        let cfg = StepConfig { epsilon: eps, ..StepConfig::new(dt).unwrap() };
        let next = parabolic_step_rho(&ParabolicState::new(dom.mode(1).unwrap()), &m, &cfg, &[0.0; 4]).unwrap();
        let a = dom.alpha1();
        let expected = (-eps * a * a * dt).exp() / (1.0 + dt * a);
        assert_abs_diff_eq!(dom.dst_forward(&next.w).0[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn damping_never_amplifies() {
        let m = quiet(63);
        for eps in [0.0, 1e-4, 1e-2, 1.0] {
            for dt in [1e-4, 1e-2, 1.0] {
                let st = RhoStepper::new(&m, StepConfig { epsilon: eps, ..StepConfig::new(dt).unwrap() });
                assert!(st.damping_factors().iter().all(|&d| (0.0..=1.0).contains(&d)));
            }
        }
    }

    #[test]
    fn u_form_matches_rho_form_for_unit_friction() {
        let m = model(31, ConstantFriction(1.0), 0.3, 0.5, 1.0, 0.4, 8);
        let dom = m.domain();
        let cfg = StepConfig::new(0.01).unwrap();
        let s = ParabolicState::new(dom.sample(|x| 2.0 * x.sin()));
        let dw: Vec<f64> = (0..8).map(|i| 0.1 * (i as f64).cos()).collect();
        let a = parabolic_step_u(&s, &m, &cfg, &dw).unwrap();
        let b = parabolic_step_rho(&s, &m, &cfg, &dw).unwrap();
        assert!(a.w.sub(&b.w).max_abs() < 1e-12);
    }

    #[test]
    fn u_form_rest_state() {
        let m = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.2, 0.0, 1.0, 0.4, 8);
        let cfg = StepConfig::new(0.01).unwrap();
        let zero = ParabolicState::new(m.domain().zeros());
        assert_eq!(parabolic_step_u(&zero, &m, &cfg, &[0.0; 8]).unwrap().w, m.domain().zeros());
    }

    #[test]
    fn correction_flag_shifts_drift_exactly() {
        let m = rational(31);
        let dom = m.domain();
        let dt = 0.01;
        let on = StepConfig::new(dt).unwrap();
        let off = StepConfig { correction: Correction::Off, ..on };
        let u0 = dom.sample(|x| 1.5 * x.sin() - 0.3 * (2.0 * x).sin());
        let s = ParabolicState::new(u0.clone());
        let dw: Vec<f64> = (0..8).map(|i| 0.05 * (i as f64 + 0.5).sin()).collect();
        let a = parabolic_step_u(&s, &m, &on, &dw).unwrap();
        let b = parabolic_step_u(&s, &m, &off, &dw).unwrap();
        // both solves share the matrix [diag(gamma) - dt Delta]; rhs differs by dt * corr
        let corr = m.correction_eval(&u0);
        let h = dom.spacing();
        let gam: Vec<f64> = u0.0.iter().map(|&r| m.gamma_eval(r)).collect();
        let c = dt / (h * h);
        let diag: Vec<f64> = gam.iter().map(|g| g + 2.0 * c).collect();
        let off_diag = vec![-c; 30];
        let delta = crate::grid::solve_tridiagonal(&diag, &off_diag, &off_diag, &corr.scale(dt)).unwrap();
        let diff = b.w.sub(&a.w);
        assert!(diff.sub(&delta).max_abs() < 1e-12);
        // to leading order the shift is dt * gamma^{-1} * corr
        let leading = Field(corr.0.iter().zip(&gam).map(|(c, g)| dt * c / g).collect());
        assert!(diff.sub(&leading).max_abs() < 0.2 * leading.max_abs());
    }

    #[test]
    fn pathwise_correction_has_drift_mean() {
        let m = rational(31);
        let dom = m.domain();
        let drift = StepConfig::new(0.01).unwrap();
        let path = StepConfig { correction: Correction::Pathwise, ..drift };
        let off = StepConfig { correction: Correction::Off, ..drift };
        let s = ParabolicState::new(dom.sample(|x| 1.5 * x.sin()));
        let mut stream = derive_stream(2, "pathwise", 0, 8);
        let n = 20_000;
        let mut mean = dom.zeros();
        let mut st_path = UStepper::new(&m, path);
        let mut st_off = UStepper::new(&m, off);
        for _ in 0..n {
            let dw = stream.next_increment(0.01).dw;
            let mut a = s.clone();
            let mut b = s.clone();
            st_path.step(&mut a, &dw).unwrap();
            st_off.step(&mut b, &dw).unwrap();
            mean = mean.add(&b.w.sub(&a.w).scale(1.0 / n as f64));
        }
        let zero = [0.0; 8];
        let expected =
            parabolic_step_u(&s, &m, &off, &zero).unwrap().w.sub(&parabolic_step_u(&s, &m, &drift, &zero).unwrap().w);
        assert!(mean.sub(&expected).max_abs() < 0.03 * expected.max_abs());
    }

    #[test]
    fn face_rules_agree_for_constant_friction() {
        let m = model(31, ConstantFriction(2.0), 0.0, 0.0, 0.0, 0.0, 4);
        let dom = m.domain();
        let s = ParabolicState::new(dom.sample(|x| x.sin() + 0.2 * (5.0 * x).sin()));
        let sec = StepConfig::new(0.01).unwrap();
        let mid = StepConfig { face_rule: FaceRule::Midpoint, ..sec };
        let a = parabolic_step_rho(&s, &m, &sec, &[0.0; 4]).unwrap();
        let b = parabolic_step_rho(&s, &m, &mid, &[0.0; 4]).unwrap();
        assert!(a.w.sub(&b.w).max_abs() < 1e-13);
    }

    #[test]
    fn secant_flux_is_laplacian_of_b() {
        // with dt -> 0 the implicit operator reduces to the explicit flux; compare one tiny step
        let m = rational(31);
        let dom = m.domain();
        let rho = dom.sample(|x| 2.0 * x.sin() + 0.5 * (3.0 * x).sin());
        let dt = 1e-9;
        let cfg = StepConfig::new(dt).unwrap();
        let zero_drift = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.0, 0.0, 0.0, 0.0, 8);
        let next = parabolic_step_rho(&ParabolicState::new(rho.clone()), &zero_drift, &cfg, &[0.0; 8]).unwrap();
        let rate = next.w.sub(&rho).scale(1.0 / dt);
        let lap = dom.laplacian_apply(&m.g_inverse_field(&rho).unwrap());
        assert!(rate.sub(&lap).max_abs() < 1e-4 * lap.max_abs());
    }

    #[test]
    fn small_mass_step_approaches_limit_step() {
        let m = rational(31);
        let dom = m.domain();
        let cfg = StepConfig::new(1e-3).unwrap();
        let u0 = dom.sample(|x| x.sin());
        let dw: Vec<f64> = (0..8).map(|i| 0.03 * (1.0 + i as f64).sin()).collect();
        let limit = parabolic_step_u(
            &ParabolicState::new(u0.clone()),
            &m,
            &StepConfig { correction: Correction::Off, ..cfg },
            &dw,
        )
        .unwrap();
        let mut prev = f64::INFINITY;
        for mu in [1e-1, 1e-2, 1e-3] {
            let w = wave_step(&WaveState::new(u0.clone(), dom.zeros(), mu).unwrap(), &m, &cfg, &dw).unwrap();
            let d = dom.l2_norm(&w.u.sub(&limit.w));
            assert!(d < prev);
            prev = d;
        }
        let w0 = wave_step(&WaveState::new(u0, dom.zeros(), 0.0).unwrap(), &m, &cfg, &dw).unwrap();
        assert!(w0.u.sub(&limit.w).max_abs() < 1e-14);
    }

    #[test]
    fn simulate_counts_and_equilibrium() {
        let m = quiet(15);
        let mut st = WaveStepper::new(&m, 1e-3);
        let mut s = WaveState::at_rest(m.domain(), 0.5).unwrap();
        let mut stream = derive_stream(1, "sim", 0, 4);
        let mut calls = 0;
        let steps = simulate(&mut st, &mut s, &mut stream, 10.0, 1, 1, |_, _| calls += 1).unwrap();
        assert_eq!(steps, 10_000);
        assert_eq!(calls, 10_000);
        assert_eq!(s.u.max_abs(), 0.0);
        assert!(simulate(&mut st, &mut s, &mut stream, 0.00105, 1, 0, |_, _| {}).is_err());
    }

    #[test]
    fn simulate_is_first_order_for_heat() {
        let m = quiet(31);
        let dom = m.domain().clone();
        let a = dom.alpha1();
        let err = |dt: f64| {
            let mut st = RhoStepper::new(&m, StepConfig::new(dt).unwrap());
            let mut s = ParabolicState::new(dom.mode(1).unwrap());
            let mut stream = derive_stream(0, "heat", 0, 4);
            simulate(&mut st, &mut s, &mut stream, 1.0, 1, 0, |_, _| {}).unwrap();
            // noise amplitude is zero so the draws do not matter
            (dom.dst_forward(&s.w).0[0] - (-a).exp()).abs()
        };
        let ratio = err(1e-3) / err(2e-3);
        assert!((ratio - 0.5).abs() < 0.02, "ratio {ratio}");
    }

    #[test]
    fn stepper_errors_carry_step_index() {
        #[derive(Debug)]
        struct Failing;
        impl Stepper for Failing {
            type State = ();
            fn dt(&self) -> f64 {
                0.5
            }
            fn step(&mut self, _: &mut (), _: &[f64]) -> Result<()> {
                Err(Error::SingularSystem { row: 0, pivot: 0.0 })
            }
        }
        let mut stream = derive_stream(0, "x", 0, 1);
        let err = simulate(&mut Failing, &mut (), &mut stream, 1.0, 1, 0, |_, _| {}).unwrap_err();
        assert!(matches!(err, Error::Step { step: 1, .. }));
    }

    #[test]
    fn energy_examples() {
        let m = rational(31);
        let dom = m.domain();
        let zero = WaveState::at_rest(dom, 0.2).unwrap();
        let e = energy_report(&zero, &model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.2, 0.0, 1.0, 0.4, 8));
        assert_eq!((e.h1_sq, e.kinetic, e.l2_sq, e.phi, e.psi), (0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(e.zeta_sq, Some(0.0));

        let s = WaveState::new(dom.mode(1).unwrap(), dom.zeros(), 1.0).unwrap();
        let e = energy_report(&s, &m);
        assert_abs_diff_eq!(e.h1_sq, dom.alpha1(), epsilon = 1e-12);
        assert_eq!(e.kinetic, 0.0);

        let s = WaveState::new(dom.sample(|x| x.sin()), dom.sample(|x| (2.0 * x).sin()), 0.3).unwrap();
        let e = energy_report(&s, &m);
        let h = dom.spacing();
        let mix: f64 = s.u.0.iter().zip(&s.v.0).map(|(&u, &v)| (0.5 * u + u.atan() + 0.3 * v).powi(2)).sum::<f64>() * h;
        assert_abs_diff_eq!(e.psi, 0.5 * (0.3 * e.h1_sq + mix), epsilon = 1e-12);
    }

    #[test]
    fn transform_examples() {
        let m = model(31, ConstantFriction(1.0), 0.0, 0.0, 1.0, 0.0, 4);
        let dom = m.domain();
        let u = dom.sample(|x| x.sin());
        let s = WaveState::new(u.clone(), dom.zeros(), 0.25).unwrap();
        let z = to_transformed(&s, &m).unwrap();
        assert!(z.eta.sub(&u.scale(2.0)).max_abs() < 1e-15);

        let r = rational(31);
        let v = dom.sample(|x| x.cos());
        let s = WaveState::new(dom.zeros(), v.clone(), 0.25).unwrap();
        assert!(to_transformed(&s, &r).unwrap().eta.sub(&v.scale(0.5)).max_abs() < 1e-15);
        assert!(to_transformed(&WaveState::at_rest(dom, 0.0).unwrap(), &r).is_err());
    }

    proptest! {
        #[test]
        fn transform_round_trip(u in prop::collection::vec(-3.0f64..3.0, 15), v in prop::collection::vec(-3.0f64..3.0, 15), mu in 1e-3f64..1.0) {
            let m = rational(15);
            let s = WaveState::new(Field(u), Field(v), mu).unwrap();
            let back = to_wave(&to_transformed(&s, &m).unwrap(), &m);
            prop_assert!(back.u.sub(&s.u).max_abs() < 1e-10);
            prop_assert!(back.v.sub(&s.v).max_abs() < 1e-10 * (1.0 + 1.0 / mu));
        }
    }
}
