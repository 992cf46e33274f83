//! Coefficients of the damped wave equation and of its small-mass limit.
//!
//! The friction `gamma`, the reaction `f(x, r)` and the noise amplitude
//! `s(y)` are pluggable laws. From them the model derives `g` (the primitive
//! of `gamma` vanishing at zero), its inverse, `b = 1/gamma(g^{-1})`, the
//! noise-induced correction drift and the constants entering the standing
//! hypotheses.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{Domain, Field, SobolevIndex};
use crate::quadrature::adaptive_simpson;

const INVERSE_TOL: f64 = 1e-14;
const INVERSE_MAX_ITER: usize = 100;
const PRIMITIVE_TOL: f64 = 1e-10;

/// A friction coefficient `gamma(r)` with `0 < gamma0 <= gamma <= gamma1`.
pub trait FrictionLaw: Send + Sync + fmt::Debug {
    fn gamma(&self, r: f64) -> f64;
    fn gamma_prime(&self, r: f64) -> f64;
    fn lower_bound(&self) -> f64;
    fn upper_bound(&self) -> f64;
    /// `sup |gamma'|`.
    fn derivative_bound(&self) -> f64;
    /// Closed form of `g(r) = int_0^r gamma`, when available.
    fn primitive(&self, _r: f64) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantFriction(pub f64);

impl FrictionLaw for ConstantFriction {
    fn gamma(&self, _r: f64) -> f64 {
        self.0
    }
    fn gamma_prime(&self, _r: f64) -> f64 {
        0.0
    }
    fn lower_bound(&self) -> f64 {
        self.0
    }
    fn upper_bound(&self) -> f64 {
        self.0
    }
    fn derivative_bound(&self) -> f64 {
        0.0
    }
    fn primitive(&self, r: f64) -> Option<f64> {
        Some(self.0 * r)
    }
}

/// `gamma(r) = a + b / (1 + r^2)`, so `g(r) = a r + b arctan r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RationalFriction {
    pub a: f64,
    pub b: f64,
}

impl FrictionLaw for RationalFriction {
    fn gamma(&self, r: f64) -> f64 {
        self.a + self.b / (1.0 + r * r)
    }
    fn gamma_prime(&self, r: f64) -> f64 {
        let d = 1.0 + r * r;
        -2.0 * self.b * r / (d * d)
    }
    fn lower_bound(&self) -> f64 {
        self.a
    }
    fn upper_bound(&self) -> f64 {
        self.a + self.b
    }
    fn derivative_bound(&self) -> f64 {
        // attained at r = 1/sqrt(3)
        9.0 * self.b.abs() / (8.0 * 3f64.sqrt())
    }
    fn primitive(&self, r: f64) -> Option<f64> {
        Some(self.a * r + self.b * r.atan())
    }
}

/// A reaction `f(x, r)`, globally Lipschitz in `r`.
pub trait ReactionLaw: Send + Sync + fmt::Debug {
    fn value(&self, x: f64, r: f64) -> f64;
    fn lipschitz(&self) -> f64;
    /// `sup_x |f(x, 0)|`.
    fn sup_at_zero(&self) -> f64;
    /// `f(x, r) - f(x, 0)` for laws where this does not depend on `x`, so the
    /// forcing `f(x, 0)` can be tabulated once on the grid.
    fn response(&self, _r: f64) -> Option<f64> {
        None
    }
    /// Closed form of `int_0^r f(x, s) ds`, when available.
    fn primitive(&self, _x: f64, _r: f64) -> Option<f64> {
        None
    }
}

/// `f(x, r) = kappa arctan(r) + beta sin(pi x / L)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArctanSineReaction {
    pub kappa: f64,
    pub beta: f64,
    pub length: f64,
}

impl ArctanSineReaction {
    pub fn zero(length: f64) -> Self {
        Self { kappa: 0.0, beta: 0.0, length }
    }

    fn source(&self, x: f64) -> f64 {
        if self.beta == 0.0 {
            0.0
        } else {
            self.beta * (PI * x / self.length).sin()
        }
    }
}

impl ReactionLaw for ArctanSineReaction {
    fn value(&self, x: f64, r: f64) -> f64 {
        self.kappa * r.atan() + self.source(x)
    }
    fn lipschitz(&self) -> f64 {
        self.kappa.abs()
    }
    fn sup_at_zero(&self) -> f64 {
        self.beta.abs()
    }
    fn response(&self, r: f64) -> Option<f64> {
        Some(if self.kappa == 0.0 { 0.0 } else { self.kappa * r.atan() })
    }
    fn primitive(&self, x: f64, r: f64) -> Option<f64> {
        Some(self.kappa * (r * r.atan() - 0.5 * (r * r).ln_1p()) + self.source(x) * r)
    }
}

/// Bounded Lipschitz amplitude `s(y)` of the multiplicative noise.
pub trait AmplitudeLaw: Send + Sync + fmt::Debug {
    fn value(&self, y: f64) -> f64;
    fn lipschitz(&self) -> f64;
    fn sup_abs(&self) -> f64;
}

/// `s(y) = s0 + s1 y / sqrt(1 + y^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturatingAmplitude {
    pub s0: f64,
    pub s1: f64,
}

impl AmplitudeLaw for SaturatingAmplitude {
    fn value(&self, y: f64) -> f64 {
        if self.s1 == 0.0 {
            self.s0
        } else {
            self.s0 + self.s1 * y / (1.0 + y * y).sqrt()
        }
    }
    fn lipschitz(&self) -> f64 {
        self.s1.abs()
    }
    fn sup_abs(&self) -> f64 {
        self.s0.abs() + self.s1.abs()
    }
}

/// Truncated spectrum `q_1..q_{N_Q}` of the noise covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpectrum {
    q: Vec<f64>,
    tail: f64,
}

impl NoiseSpectrum {
    /// `q_i = scale * i^{-decay}` for `i <= modes`; the reported tail is
    /// the integral bound on the discarded `sum_{i > modes} q_i^2`.
    pub fn power_law(scale: f64, decay: f64, modes: usize) -> Result<Self> {
        if modes == 0 {
            return Err(Error::InvalidParameter("noise needs at least one mode".into()));
        }
        if !(scale.is_finite() && decay.is_finite()) {
            return Err(Error::InvalidParameter("noise spectrum parameters must be finite".into()));
        }
        let q = (1..=modes).map(|i| scale * (i as f64).powf(-decay)).collect();
        let tail = if scale == 0.0 {
            0.0
        } else if 2.0 * decay > 1.0 {
            scale * scale * (modes as f64).powf(1.0 - 2.0 * decay) / (2.0 * decay - 1.0)
        } else {
            f64::INFINITY
        };
        Ok(Self { q, tail })
    }

    pub fn explicit(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() || q.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("explicit spectrum needs finite nonnegative entries".into()));
        }
        Ok(Self { q, tail: 0.0 })
    }

    pub fn modes(&self) -> usize {
        self.q.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.q
    }

    pub fn trace_sq(&self) -> f64 {
        self.q.iter().map(|q| q * q).sum()
    }

    pub fn tail_mass(&self) -> f64 {
        self.tail
    }
}

#[derive(Clone)]
pub struct FrictionSpec(pub Arc<dyn FrictionLaw>);

#[derive(Clone)]
pub struct ReactionSpec(pub Arc<dyn ReactionLaw>);

#[derive(Clone)]
pub struct DiffusionSpec {
    pub amplitude: Arc<dyn AmplitudeLaw>,
    pub spectrum: NoiseSpectrum,
}

impl FrictionSpec {
    pub fn new(law: impl FrictionLaw + 'static) -> Self {
        Self(Arc::new(law))
    }

    pub fn gamma(&self, r: f64) -> f64 {
        self.0.gamma(r)
    }

    pub fn gamma_prime(&self, r: f64) -> f64 {
        self.0.gamma_prime(r)
    }

    pub fn gamma0(&self) -> f64 {
        self.0.lower_bound()
    }

    pub fn gamma1(&self) -> f64 {
        self.0.upper_bound()
    }

    /// `g(r) = int_0^r gamma`.
    pub fn g(&self, r: f64) -> f64 {
        self.0.primitive(r).unwrap_or_else(|| adaptive_simpson(|s| self.0.gamma(s), 0.0, r, PRIMITIVE_TOL))
    }

    /// `g^{-1}(y)` by Newton iteration safeguarded with bisection.
    pub fn g_inverse(&self, y: f64) -> Result<f64> {
        self.g_inverse_near(y, y / self.gamma1())
    }

    /// As [`FrictionSpec::g_inverse`], starting from `guess`.
    pub fn g_inverse_near(&self, y: f64, guess: f64) -> Result<f64> {
        if y == 0.0 {
            return Ok(0.0);
        }
        if !y.is_finite() {
            return Err(Error::InverseNoConvergence { y, iterations: 0 });
        }
        // gamma0 |r| <= |g(r)| <= gamma1 |r| brackets the root
        let (mut lo, mut hi) =
            if y > 0.0 { (y / self.gamma1(), y / self.gamma0()) } else { (y / self.gamma0(), y / self.gamma1()) };
        let tol = INVERSE_TOL * y.abs().max(1.0);
        let mut x = if guess > lo && guess < hi { guess } else { 0.5 * (lo + hi) };
        for _ in 0..INVERSE_MAX_ITER {
            let r = self.g(x) - y;
            if r.abs() <= tol {
                return Ok(x);
            }
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let next = x - r / self.gamma(x);
            x = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if hi - lo <= f64::EPSILON * x.abs().max(1e-300) {
                return Ok(x);
            }
        }
        Err(Error::InverseNoConvergence { y, iterations: INVERSE_MAX_ITER })
    }

    /// `b(r) = 1 / gamma(g^{-1}(r))`.
    pub fn b(&self, r: f64) -> Result<f64> {
        Ok(1.0 / self.gamma(self.g_inverse(r)?))
    }

    /// `B(r) = int_0^r b`, which equals `g^{-1}(r)`.
    pub fn big_b(&self, r: f64) -> Result<f64> {
        self.g_inverse(r)
    }
}

impl fmt::Debug for FrictionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for ReactionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiffusionSpec").field("amplitude", &self.amplitude).field("spectrum", &self.spectrum).finish()
    }
}

/// Values of the Lyapunov functionals at a state `(u, v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lyapunov {
    /// `1/2 (|u|_{H1}^2 + mu |v|^2) - Lambda(u)`.
    pub phi: f64,
    /// `1/2 (mu |u|_{H1}^2 + |g(u) + mu v|^2)`.
    pub psi: f64,
    /// `Lambda(u) = int F(x, u(x)) dx` with `F` the primitive of `f` in `r`.
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Check {
    pub lhs: f64,
    pub rhs: f64,
    /// `1 - lhs / rhs`; positive when the strict inequality holds.
    pub margin: f64,
    pub pass: bool,
}

impl Check {
    fn strict(lhs: f64, rhs: f64) -> Self {
        Self { lhs, rhs, margin: 1.0 - lhs / rhs, pass: lhs < rhs }
    }
}

/// Derived constants and the outcome of each standing hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma_prime_bound: f64,
    pub lf: f64,
    pub lsigma: f64,
    pub sigma_inf: f64,
    pub alpha1: f64,
    pub noise_modes: usize,
    pub tail_mass: f64,
    pub friction_bounded: bool,
    pub reaction_condition: Check,
    pub control_condition: Check,
}

impl HypothesisReport {
    pub fn passes(&self) -> bool {
        self.friction_bounded && self.reaction_condition.pass && self.control_condition.pass
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.friction_bounded {
            out.push(format!("friction bounds 0 < {} <= {} violated", self.gamma0, self.gamma1));
        }
        if !self.reaction_condition.pass {
            out.push(format!(
                "L_f < alpha1 gamma0 / gamma1 fails: {} >= {}",
                self.reaction_condition.lhs, self.reaction_condition.rhs
            ));
        }
        if !self.control_condition.pass {
            out.push(format!(
                "L_f + L_sigma / (2 gamma0) < alpha1 gamma0 / gamma1 fails: {} >= {}",
                self.control_condition.lhs, self.control_condition.rhs
            ));
        }
        out
    }
}

/// All coefficients on one grid, with the per-node noise tables precomputed.
#[derive(Clone)]
pub struct ModelSpec {
    dom: Domain,
    friction: FrictionSpec,
    reaction: ReactionSpec,
    diffusion: DiffusionSpec,
    /// `noise_basis[i * M + j] = q_{i+1} e_{i+1}(x_j)`.
    noise_basis: Arc<Vec<f64>>,
    /// `sum_i q_i^2 e_i(x_j)^2`.
    mode_sum: Arc<Vec<f64>>,
    nodes: Arc<Vec<f64>>,
    /// `f(x_j, 0)` when the reaction law splits.
    forcing: Option<Arc<Vec<f64>>>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("dom", &self.dom)
            .field("friction", &self.friction)
            .field("reaction", &self.reaction)
            .field("diffusion", &self.diffusion)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(dom: Domain, friction: FrictionSpec, reaction: ReactionSpec, diffusion: DiffusionSpec) -> Result<Self> {
        let m = dom.points();
        let n_q = diffusion.spectrum.modes();
        if n_q > m {
            return Err(Error::InvalidParameter(format!(
                "{n_q} noise modes exceed the {m} modes resolved by the grid"
            )));
        }
        let q = diffusion.spectrum.values();
        let mut noise_basis = Vec::with_capacity(n_q * m);
        let mut mode_sum = vec![0.0; m];
        for (i, &qi) in q.iter().enumerate() {
            for (j, s) in mode_sum.iter_mut().enumerate() {
                let v = qi * dom.basis(i + 1, j);
                noise_basis.push(v);
                *s += v * v;
            }
        }
        let nodes: Vec<f64> = dom.nodes().collect();
        let forcing = reaction
            .0
            .response(0.0)
            .map(|_| Arc::new(nodes.iter().map(|&x| reaction.0.value(x, 0.0)).collect::<Vec<f64>>()));
        Ok(Self {
            forcing,
            dom,
            friction,
            reaction,
            diffusion,
            noise_basis: Arc::new(noise_basis),
            mode_sum: Arc::new(mode_sum),
            nodes: Arc::new(nodes),
        })
    }

    pub fn domain(&self) -> &Domain {
        &self.dom
    }

    pub fn friction(&self) -> &FrictionSpec {
        &self.friction
    }

    pub fn reaction(&self) -> &ReactionSpec {
        &self.reaction
    }

    pub fn diffusion(&self) -> &DiffusionSpec {
        &self.diffusion
    }

    pub fn noise_modes(&self) -> usize {
        self.diffusion.spectrum.modes()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// `sum_i q_i^2 e_i(x_j)^2` per node.
    pub fn mode_sum(&self) -> &[f64] {
        &self.mode_sum
    }

    pub fn gamma_eval(&self, r: f64) -> f64 {
        self.friction.gamma(r)
    }

    pub fn g_eval(&self, r: f64) -> f64 {
        self.friction.g(r)
    }

    pub fn g_inverse(&self, y: f64) -> Result<f64> {
        self.friction.g_inverse(y)
    }

    pub fn b_eval(&self, r: f64) -> Result<f64> {
        self.friction.b(r)
    }

    #[allow(non_snake_case)]
    pub fn B_eval(&self, r: f64) -> Result<f64> {
        self.friction.big_b(r)
    }

    pub fn g_field(&self, u: &Field) -> Field {
        u.map(|r| self.friction.g(r))
    }

    pub fn g_inverse_field(&self, rho: &Field) -> Result<Field> {
        rho.0.iter().map(|&y| self.friction.g_inverse(y)).collect::<Result<Vec<_>>>().map(Field)
    }

    /// `F(u)(x_j) = f(x_j, u_j)`.
    pub fn reaction_apply(&self, u: &Field) -> Field {
        let mut out = vec![0.0; u.len()];
        self.reaction_into(u.as_slice(), &mut out);
        Field(out)
    }

    pub(crate) fn reaction_into(&self, u: &[f64], out: &mut [f64]) {
        let law = &self.reaction.0;
        match &self.forcing {
            Some(forcing) => {
                for ((o, &f0), &r) in out.iter_mut().zip(forcing.iter()).zip(u) {
                    *o = f0 + law.response(r).unwrap_or(0.0);
                }
            }
            None => {
                for ((o, &x), &r) in out.iter_mut().zip(self.nodes.iter()).zip(u) {
                    *o = law.value(x, r);
                }
            }
        }
    }

    /// `f_g(x, rho) = f(x, g^{-1}(rho))`.
    pub fn reaction_g_apply(&self, rho: &Field) -> Result<Field> {
        Ok(self.reaction_apply(&self.g_inverse_field(rho)?))
    }

    /// `sum_i q_i e_i(x_j) dW_i`, the noise before the amplitude is applied.
    pub(crate) fn noise_into(&self, dw: &[f64], out: &mut [f64]) {
        let m = self.dom.points();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &w) in dw.iter().enumerate().take(self.noise_modes()) {
            if w == 0.0 {
                continue;
            }
            let row = &self.noise_basis[i * m..(i + 1) * m];
            for (o, b) in out.iter_mut().zip(row) {
                *o += w * b;
            }
        }
    }

    /// `sum_i sigma_i(x_j, u_j) dW_i = s(u_j) sum_i q_i e_i(x_j) dW_i`.
    pub fn diffusion_apply(&self, u: &Field, dw: &[f64]) -> Field {
        let mut out = vec![0.0; u.len()];
        self.noise_into(dw, &mut out);
        let amp = &self.diffusion.amplitude;
        for (o, &r) in out.iter_mut().zip(&u.0) {
            *o *= amp.value(r);
        }
        Field(out)
    }

    /// Pointwise `gamma'(u) / (2 gamma(u)^2) * s(u)^2 * sum_i q_i^2 e_i^2`.
    ///
    /// The limit equation carries this term with a minus sign.
    pub fn correction_eval(&self, u: &Field) -> Field {
        Field(u.0.iter().zip(self.mode_sum.iter()).map(|(&r, &ms)| self.correction_at(r, ms)).collect())
    }

    #[inline]
    pub(crate) fn correction_at(&self, r: f64, mode_sum: f64) -> f64 {
        let dg = self.friction.gamma_prime(r);
        if dg == 0.0 {
            return 0.0;
        }
        let g = self.friction.gamma(r);
        let s = self.diffusion.amplitude.value(r);
        dg / (2.0 * g * g) * s * s * mode_sum
    }

    /// `int_0^r f(x, s) ds`, closed form or adaptive Simpson.
    pub fn reaction_primitive(&self, x: f64, r: f64) -> f64 {
        let law = &self.reaction.0;
        law.primitive(x, r).unwrap_or_else(|| adaptive_simpson(|s| law.value(x, s), 0.0, r, PRIMITIVE_TOL))
    }

    pub fn lyapunov_values(&self, u: &Field, v: &Field, mu: f64) -> Lyapunov {
        let dom = &self.dom;
        let h1 = dom.sobolev_norm_sq(u, SobolevIndex::H1);
        let kin = mu * dom.inner(v, v);
        let lambda =
            dom.spacing() * self.nodes.iter().zip(&u.0).map(|(&x, &r)| self.reaction_primitive(x, r)).sum::<f64>();
        let gu = self.g_field(u);
        let mixed = gu.add(&v.scale(mu));
        let psi = 0.5 * (mu * h1 + dom.inner(&mixed, &mixed));
        Lyapunov { phi: 0.5 * (h1 + kin) - lambda, psi, lambda }
    }

    pub fn lsigma(&self) -> f64 {
        let lip = self.diffusion.amplitude.lipschitz();
        let peak = self.mode_sum.iter().fold(0.0f64, |m, &v| m.max(v));
        lip * lip * peak
    }

    /// `sup_h ||sigma(h)||_{HS}`; by discrete orthonormality this is `sup|s| * sqrt(sum q_i^2)`.
    pub fn sigma_inf(&self) -> f64 {
        self.diffusion.amplitude.sup_abs() * self.diffusion.spectrum.trace_sq().sqrt()
    }

    pub fn hypothesis_check(&self) -> HypothesisReport {
        let gamma0 = self.friction.gamma0();
        let gamma1 = self.friction.gamma1();
        let lf = self.reaction.0.lipschitz();
        let lsigma = self.lsigma();
        let alpha1 = self.dom.alpha1();
        let friction_bounded = gamma0 > 0.0 && gamma0 <= gamma1 && gamma1.is_finite();
        let rhs = alpha1 * gamma0 / gamma1;
        HypothesisReport {
            gamma0,
            gamma1,
            gamma_prime_bound: self.friction.0.derivative_bound(),
            lf,
            lsigma,
            sigma_inf: self.sigma_inf(),
            alpha1,
            noise_modes: self.noise_modes(),
            tail_mass: self.diffusion.spectrum.tail_mass(),
            friction_bounded,
            reaction_condition: Check::strict(lf, rhs),
            control_condition: Check::strict(lf + lsigma / (2.0 * gamma0), rhs),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn gamma_examples() {
        let c = model(15, ConstantFriction(2.0), 0.0, 0.0, 1.0, 0.0, 4);
        assert_eq!(c.gamma_eval(5.0), 2.0);
        let r = model(15, RationalFriction { a: 1.0, b: 1.0 }, 0.0, 0.0, 1.0, 0.0, 4);
        assert_eq!(r.gamma_eval(0.0), 2.0);
        assert_abs_diff_eq!(r.gamma_eval(1e8), 1.0, epsilon = 1e-12);
        let fr = r.friction();
        let mut rng = rng();
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-50.0..50.0);
            let g = r.gamma_eval(x);
            assert!(g >= fr.gamma0() && g <= fr.gamma1());
        }
    }

    #[test]
    fn g_examples() {
        let c = FrictionSpec::new(ConstantFriction(3.0));
        assert_eq!(c.g(2.0), 6.0);
        let r = FrictionSpec::new(RationalFriction { a: 1.0, b: 1.0 });
        assert_abs_diff_eq!(r.g(1.0), 1.0 + PI / 4.0, epsilon = 1e-15);
        assert_eq!(r.g(0.0), 0.0);
        let mut rng = rng();
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-5.0..5.0);
            let h = 1e-5;
            let fd = (r.g(x + h) - r.g(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(fd, r.gamma(x), epsilon = 1e-6);
            assert!(r.g(x).abs() >= r.gamma0() * x.abs() - 1e-12);
            assert!(r.g(x).abs() <= r.gamma1() * x.abs() + 1e-12);
        }
    }

    #[derive(Debug)]
    struct NoPrimitive(RationalFriction);

    impl FrictionLaw for NoPrimitive {
        fn gamma(&self, r: f64) -> f64 {
            self.0.gamma(r)
        }
        fn gamma_prime(&self, r: f64) -> f64 {
            self.0.gamma_prime(r)
        }
        fn lower_bound(&self) -> f64 {
            self.0.lower_bound()
        }
        fn upper_bound(&self) -> f64 {
            self.0.upper_bound()
        }
        fn derivative_bound(&self) -> f64 {
            self.0.derivative_bound()
        }
    }

    #[test]
    fn numeric_primitive_matches_closed_form() {
        let law = RationalFriction { a: 0.5, b: 2.0 };
        let closed = FrictionSpec::new(law);
        let numeric = FrictionSpec::new(NoPrimitive(law));
        for r in [-3.0, -0.2, 0.0, 0.7, 4.0] {
            assert_abs_diff_eq!(closed.g(r), numeric.g(r), epsilon = 1e-9);
        }
        let y = 1.3;
        assert_abs_diff_eq!(numeric.g(numeric.g_inverse(y).unwrap()), y, epsilon = 1e-9);
    }

    #[test]
    fn g_inverse_examples() {
        let c = FrictionSpec::new(ConstantFriction(4.0));
        assert_abs_diff_eq!(c.g_inverse(2.0).unwrap(), 0.5, epsilon = 1e-15);
        let r = FrictionSpec::new(RationalFriction { a: 0.5, b: 1.0 });
        assert_eq!(r.g_inverse(0.0).unwrap(), 0.0);
        let mut rng = rng();
        for _ in 0..10_000 {
            let y: f64 = rng.gen_range(-10.0..10.0);
            let x = r.g_inverse(y).unwrap();
            assert!((r.g(x) - y).abs() < 1e-12, "y = {y}");
        }
        assert!(r.g_inverse(f64::NAN).is_err());
    }

    #[test]
    fn b_examples() {
        let c = FrictionSpec::new(ConstantFriction(4.0));
        assert_abs_diff_eq!(c.b(3.0).unwrap(), 0.25, epsilon = 1e-15);
        let r = FrictionSpec::new(RationalFriction { a: 0.5, b: 1.0 });
        assert_abs_diff_eq!(r.b(0.0).unwrap(), 1.0 / r.gamma(0.0), epsilon = 1e-15);
        let mut rng = rng();
        for _ in 0..10_000 {
            let y: f64 = rng.gen_range(-20.0..20.0);
            let b = r.b(y).unwrap();
            assert!(b >= 1.0 / r.gamma1() - 1e-15 && b <= 1.0 / r.gamma0() + 1e-15);
        }
    }

    #[test]
    fn big_b_is_quadrature_of_b() {
        let c = FrictionSpec::new(ConstantFriction(2.0));
        assert_abs_diff_eq!(c.big_b(3.0).unwrap(), 1.5, epsilon = 1e-15);
        let r = FrictionSpec::new(RationalFriction { a: 0.5, b: 1.0 });
        assert_eq!(r.big_b(0.0).unwrap(), 0.0);
        for y in [-5.0, -1.0, 1.0, 5.0] {
            // Simpson oracle over b, independent of g^{-1} except through the integrand
            let quad = adaptive_simpson(|s| r.b(s).unwrap(), 0.0, y, 1e-11);
            assert_abs_diff_eq!(quad, r.big_b(y).unwrap(), epsilon = 1e-8);
        }
        let mut rng = rng();
        for _ in 0..10_000 {
            let y: f64 = rng.gen_range(-10.0..10.0);
            assert!((r.big_b(y).unwrap() - r.g_inverse(y).unwrap()).abs() <= 1e-10);
        }
    }

    #[test]
    fn g_inverse_is_lipschitz() {
        let r = FrictionSpec::new(RationalFriction { a: 0.5, b: 1.0 });
        let mut rng = rng();
        for _ in 0..2000 {
            let y1: f64 = rng.gen_range(-5.0..5.0);
            let y2: f64 = rng.gen_range(-5.0..5.0);
            if y1 == y2 {
                continue;
            }
            let slope = (r.g_inverse(y1).unwrap() - r.g_inverse(y2).unwrap()).abs() / (y1 - y2).abs();
            assert!(slope <= 1.0 / r.gamma0() + 1e-9);
            assert!((r.g(y1) - r.g(y2)) * (y1 - y2) > 0.0);
        }
    }

    #[test]
    fn reaction_examples() {
        let zero = model(15, ConstantFriction(1.0), 0.0, 0.0, 1.0, 0.0, 4);
        let u = zero.domain().sample(|x| x.cos());
        assert!(zero.reaction_apply(&u).0.iter().all(|&v| v == 0.0));

        let src = model(15, ConstantFriction(1.0), 0.0, 1.0, 1.0, 0.0, 4);
        let expected = src.domain().sample(|x| x.sin());
        let out = src.reaction_apply(&u);
        for (a, b) in out.0.iter().zip(&expected.0) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn reaction_g_examples() {
        let id = model(15, ConstantFriction(1.0), 0.3, 0.5, 1.0, 0.0, 4);
        let rho = id.domain().sample(|x| 2.0 * x.sin());
        assert_eq!(id.reaction_g_apply(&rho).unwrap(), id.reaction_apply(&rho));

        let m = rational(15);
        let zero = m.domain().zeros();
        assert_eq!(m.reaction_g_apply(&zero).unwrap(), m.reaction_apply(&zero));
        let composed = m.reaction_apply(&m.g_inverse_field(&rho).unwrap());
        let direct = m.reaction_g_apply(&rho).unwrap();
        for (a, b) in composed.0.iter().zip(&direct.0) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn diffusion_examples() {
        let silent = model(31, ConstantFriction(1.0), 0.0, 0.0, 0.0, 0.0, 8);
        let u = silent.domain().sample(|x| x.sin());
        assert!(silent.diffusion_apply(&u, &[1.0; 8]).0.iter().all(|&v| v == 0.0));

        let dom = Domain::new(PI, 31).unwrap();
        let single = ModelSpec::new(
            dom.clone(),
            FrictionSpec::new(ConstantFriction(1.0)),
            ReactionSpec(Arc::new(ArctanSineReaction::zero(PI))),
            DiffusionSpec {
                amplitude: Arc::new(SaturatingAmplitude { s0: 1.0, s1: 0.0 }),
                spectrum: NoiseSpectrum::explicit(vec![1.0, 0.0, 0.0]).unwrap(),
            },
        )
        .unwrap();
        let out = single.diffusion_apply(&u, &[1.0, 0.0, 0.0]);
        assert_eq!(out, dom.mode(1).unwrap());

        // brute-force double sum over sigma_i(x, y) = q_i e_i(x) s(y)
        let m = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.0, 0.0, 1.0, 0.4, 8);
        let dw: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let u = m.domain().sample(|x| (3.0 * x).cos());
        let out = m.diffusion_apply(&u, &dw);
        for j in 0..31 {
            let x = m.domain().node(j);
            let mut acc = 0.0;
            for (i, w) in dw.iter().enumerate() {
                let q = 1.0 / (i as f64 + 1.0);
                let e = (2.0 / PI).sqrt() * ((i as f64 + 1.0) * x).sin();
                acc += q * e * (1.0 + 0.4 * u.0[j] / (1.0 + u.0[j] * u.0[j]).sqrt()) * w;
            }
            assert_abs_diff_eq!(out.0[j], acc, epsilon = 1e-12);
        }
    }

    #[test]
    fn correction_examples() {
        let flat = model(31, ConstantFriction(2.0), 0.0, 0.0, 1.0, 0.4, 8);
        let u = flat.domain().sample(|x| x.sin());
        assert!(flat.correction_eval(&u).0.iter().all(|&v| v == 0.0));
        let silent = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.0, 0.0, 0.0, 0.0, 8);
        assert!(silent.correction_eval(&u).0.iter().all(|&v| v == 0.0));

        let m = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.0, 0.0, 1.0, 0.4, 8);
        let corr = m.correction_eval(&u);
        for j in 0..31 {
            let x = m.domain().node(j);
            let r = u.0[j];
            let s = 1.0 + 0.4 * r / (1.0 + r * r).sqrt();
            let brute: f64 = (1..=8)
                .map(|i| {
                    let sigma = (1.0 / i as f64) * (2.0 / PI).sqrt() * (i as f64 * x).sin() * s;
                    sigma * sigma
                })
                .sum();
            let gam = 0.5 + 1.0 / (1.0 + r * r);
            let dgam = -2.0 * r / (1.0 + r * r).powi(2);
            assert_abs_diff_eq!(corr.0[j], dgam / (2.0 * gam * gam) * brute, epsilon = 1e-12);
        }
    }

    #[test]
    fn lyapunov_examples() {
        let m = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.2, 0.0, 1.0, 0.0, 4);
        let z = m.domain().zeros();
        let l = m.lyapunov_values(&z, &z, 0.1);
        assert_eq!((l.phi, l.psi, l.lambda), (0.0, 0.0, 0.0));

        let free = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.0, 0.0, 1.0, 0.0, 4);
        let u = free.domain().sample(|x| x.sin());
        let v = free.domain().sample(|x| (2.0 * x).sin());
        let l = free.lyapunov_values(&u, &v, 0.3);
        let dom = free.domain();
        let expected = 0.5 * (dom.sobolev_norm_sq(&u, SobolevIndex::H1) + 0.3 * dom.inner(&v, &v));
        assert_abs_diff_eq!(l.phi, expected, epsilon = 1e-12);

        // psi by direct recomputation
        let mixed: Vec<f64> = u.0.iter().zip(&v.0).map(|(&a, &b)| 0.5 * a + a.atan() + 0.3 * b).collect();
        let psi = 0.5
            * (0.3 * dom.sobolev_norm_sq(&u, SobolevIndex::H1)
                + dom.spacing() * mixed.iter().map(|x| x * x).sum::<f64>());
        assert_abs_diff_eq!(l.psi, psi, epsilon = 1e-12);
    }

    #[test]
    fn lambda_matches_quadrature() {
        let m = model(31, ConstantFriction(1.0), 0.4, 0.7, 1.0, 0.0, 4);
        let u = m.domain().sample(|x| 3.0 * x.sin() - 1.0);
        let l = m.lyapunov_values(&u, &m.domain().zeros(), 1.0);
        let h = m.domain().spacing();
        let oracle: f64 = (0..31)
            .map(|j| {
                let x = m.domain().node(j);
                adaptive_simpson(|s| 0.4 * s.atan() + 0.7 * x.sin(), 0.0, u.0[j], 1e-12)
            })
            .sum::<f64>()
            * h;
        assert_abs_diff_eq!(l.lambda, oracle, epsilon = 1e-8);
    }

    #[test]
    fn hypothesis_examples() {
        let trivial = model(31, ConstantFriction(1.0), 0.0, 0.0, 0.7, 0.0, 8);
        let rep = trivial.hypothesis_check();
        assert!(rep.passes());
        assert_eq!(rep.lf, 0.0);
        assert_eq!(rep.lsigma, 0.0);

        // gamma0 = 1, gamma1 = 2, L_f = alpha1
        let dom = Domain::new(PI, 31).unwrap();
        let alpha1 = dom.alpha1();
        let m = model(31, RationalFriction { a: 1.0, b: 1.0 }, alpha1, 0.0, 1.0, 0.0, 8);
        let rep = m.hypothesis_check();
        assert!(!rep.reaction_condition.pass);
        assert_abs_diff_eq!(rep.reaction_condition.rhs, alpha1 / 2.0, epsilon = 1e-15);
        assert!(!rep.passes());
        assert_eq!(rep.failures().len(), 2);
    }

    #[test]
    fn tail_mass_of_power_law() {
        let s = NoiseSpectrum::power_law(1.0, 1.0, 16).unwrap();
        assert_abs_diff_eq!(s.tail_mass(), 1.0 / 16.0, epsilon = 1e-15);
        let exact: f64 = (17..2_000_000).map(|i| 1.0 / (i as f64 * i as f64)).sum();
        assert!(s.tail_mass() >= exact);
        assert!(NoiseSpectrum::power_law(1.0, 0.5, 16).unwrap().tail_mass().is_infinite());
    }

    #[test]
    fn too_many_noise_modes_rejected() {
        let dom = Domain::new(PI, 7).unwrap();
        let err = ModelSpec::new(
            dom,
            FrictionSpec::new(ConstantFriction(1.0)),
            ReactionSpec(Arc::new(ArctanSineReaction::zero(PI))),
            DiffusionSpec {
                amplitude: Arc::new(SaturatingAmplitude { s0: 1.0, s1: 0.0 }),
                spectrum: NoiseSpectrum::power_law(1.0, 1.0, 8).unwrap(),
            },
        );
        assert!(err.is_err());
    }

    proptest! {
        #[test]
        fn reaction_is_lipschitz(a in prop::collection::vec(-5.0f64..5.0, 15), b in prop::collection::vec(-5.0f64..5.0, 15)) {
            let m = rational(15);
            let (a, b) = (Field(a), Field(b));
            let dom = m.domain();
            let num = dom.l2_norm(&m.reaction_apply(&a).sub(&m.reaction_apply(&b)));
            let den = dom.l2_norm(&a.sub(&b));
            prop_assert!(num <= (m.hypothesis_check().lf + 1e-9) * den + 1e-12);
            let g_num = dom.l2_norm(&m.reaction_g_apply(&a).unwrap().sub(&m.reaction_g_apply(&b).unwrap()));
            prop_assert!(g_num <= m.hypothesis_check().lf / m.friction().gamma0() * den + 1e-9);
        }

        #[test]
        fn hilbert_schmidt_bound(u in prop::collection::vec(-10.0f64..10.0, 31)) {
            let m = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.0, 0.0, 1.0, 0.4, 16);
            let h = m.domain().spacing();
            let total: f64 = u.iter().zip(m.mode_sum()).map(|(&r, &ms)| {
                let s = m.diffusion().amplitude.value(r);
                s * s * ms
            }).sum::<f64>() * h;
            prop_assert!(total <= m.sigma_inf().powi(2) + 1e-9);
        }

        #[test]
        fn lsigma_bounds_noise_differences(y1 in -5.0f64..5.0, y2 in -5.0f64..5.0) {
            let m = model(31, RationalFriction { a: 0.5, b: 1.0 }, 0.0, 0.0, 1.0, 0.4, 16);
            let amp = &m.diffusion().amplitude;
            let ds = amp.value(y1) - amp.value(y2);
            for &ms in m.mode_sum() {
                prop_assert!(ds * ds * ms <= m.lsigma() * (y1 - y2).powi(2) + 1e-12);
            }
        }
    }
}
