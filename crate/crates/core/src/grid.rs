//! One-dimensional Dirichlet grid on `(0, L)`.
//!
//! A [`Field`] holds the `M` interior values; the boundary zeros are implicit.
//! The discrete sine vectors `e_i(x_j) = sqrt(2/L) sin(i pi x_j / L)` are
//! orthonormal for `<f, g>_h = h * sum_j f_j g_j` and diagonalize the
//! three-point Laplacian with eigenvalues `-alpha_i`, where
//! `alpha_i = (4/h^2) sin^2(i pi h / (2L))`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Which eigenvalues weight the Sobolev norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Spectrum {
    /// Eigenvalues of the three-point Laplacian (exact at finite `M`).
    #[default]
    Discrete,
    /// Continuum Dirichlet eigenvalues `(i pi / L)^2`.
    Continuum,
}

struct DomainData {
    length: f64,
    points: usize,
    spacing: f64,
    spectrum: Spectrum,
    discrete_eigs: Vec<f64>,
    continuum_eigs: Vec<f64>,
    /// Row-major `sines[(i-1) * M + (j-1)] = e_i(x_j)`.
    sines: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

/// The interval `(0, L)` with `M` interior grid points.
#[derive(Clone)]
pub struct Domain {
    inner: Arc<DomainData>,
}

impl fmt::Debug for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Domain")
            .field("length", &self.inner.length)
            .field("points", &self.inner.points)
            .field("spectrum", &self.inner.spectrum)
            .finish()
    }
}

impl PartialEq for Domain {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner)
            || (self.inner.length == other.inner.length
                && self.inner.points == other.inner.points
                && self.inner.spectrum == other.inner.spectrum)
    }
}

impl Domain {
    pub fn new(length: f64, points: usize) -> Result<Self> {
        Self::with_spectrum(length, points, Spectrum::Discrete)
    }

    pub fn with_spectrum(length: f64, points: usize, spectrum: Spectrum) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::InvalidDomain(format!("length must be positive, got {length}")));
        }
        if points < 3 {
            return Err(Error::InvalidDomain(format!("need at least 3 interior points, got {points}")));
        }
        let spacing = length / (points as f64 + 1.0);
        let discrete_eigs = (1..=points)
            .map(|i| {
                let s = (i as f64 * PI * spacing / (2.0 * length)).sin();
                4.0 / (spacing * spacing) * s * s
            })
            .collect();
        let continuum_eigs = (1..=points)
            .map(|i| {
                let k = i as f64 * PI / length;
                k * k
            })
            .collect();
        let norm = (2.0 / length).sqrt();
        let mut sines = Vec::with_capacity(points * points);
        for i in 1..=points {
            for j in 1..=points {
                sines.push(norm * (PI * (i * j) as f64 / (points as f64 + 1.0)).sin());
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(2 * (points + 1));
        Ok(Self {
            inner: Arc::new(DomainData {
                length,
                points,
                spacing,
                spectrum,
                discrete_eigs,
                continuum_eigs,
                sines,
                fft,
            }),
        })
    }

    pub fn length(&self) -> f64 {
        self.inner.length
    }

    pub fn points(&self) -> usize {
        self.inner.points
    }

    pub fn spacing(&self) -> f64 {
        self.inner.spacing
    }

    pub fn spectrum(&self) -> Spectrum {
        self.inner.spectrum
    }

    /// Coordinate of the interior node with zero-based index `j`.
    pub fn node(&self, j: usize) -> f64 {
        (j as f64 + 1.0) * self.inner.spacing
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.points()).map(move |j| self.node(j))
    }

    /// `e_i(x_j)` for mode `i` in `1..=M` and zero-based node `j`.
    pub fn basis(&self, i: usize, j: usize) -> f64 {
        self.inner.sines[(i - 1) * self.points() + j]
    }

    /// Sampled basis vector `e_i`.
    pub fn mode(&self, i: usize) -> Result<Field> {
        self.check_mode(i)?;
        let m = self.points();
        Ok(Field(self.inner.sines[(i - 1) * m..i * m].to_vec()))
    }

    /// Discrete eigenvalue `alpha_i` of `-Delta_h`, `i` in `1..=M`.
    pub fn eigenvalue(&self, i: usize) -> Result<f64> {
        self.check_mode(i)?;
        Ok(self.inner.discrete_eigs[i - 1])
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.inner.discrete_eigs
    }

    pub fn continuum_eigenvalues(&self) -> &[f64] {
        &self.inner.continuum_eigs
    }

    /// Eigenvalues used as Sobolev weights.
    pub fn weight_eigenvalues(&self) -> &[f64] {
        match self.inner.spectrum {
            Spectrum::Discrete => &self.inner.discrete_eigs,
            Spectrum::Continuum => &self.inner.continuum_eigs,
        }
    }

    /// Smallest discrete eigenvalue, the Poincare constant of the grid.
    pub fn alpha1(&self) -> f64 {
        self.inner.discrete_eigs[0]
    }

    fn check_mode(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.points() {
            return Err(Error::ModeOutOfRange { index: i, points: self.points() });
        }
        Ok(())
    }

    pub fn check(&self, f: &Field) -> Result<()> {
        if f.len() != self.points() {
            return Err(Error::LengthMismatch { expected: self.points(), got: f.len() });
        }
        Ok(())
    }

    pub fn zeros(&self) -> Field {
        Field(vec![0.0; self.points()])
    }

    pub fn sample(&self, profile: impl Fn(f64) -> f64) -> Field {
        Field(self.nodes().map(profile).collect())
    }

    pub fn inner(&self, f: &Field, g: &Field) -> f64 {
        self.spacing() * f.0.iter().zip(&g.0).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn l2_norm(&self, f: &Field) -> f64 {
        self.inner(f, f).sqrt()
    }

    /// Coefficients against the orthonormal sine vectors by direct summation.
    pub fn dst_forward(&self, f: &Field) -> SineCoeffs {
        let mut out = vec![0.0; self.points()];
        self.dst_forward_into(f.as_slice(), &mut out);
        SineCoeffs(out)
    }

    pub(crate) fn dst_forward_into(&self, f: &[f64], out: &mut [f64]) {
        let m = self.points();
        let h = self.spacing();
        for (i, c) in out.iter_mut().enumerate() {
            let row = &self.inner.sines[i * m..(i + 1) * m];
            *c = h * row.iter().zip(f).map(|(s, v)| s * v).sum::<f64>();
        }
    }

    pub fn dst_inverse(&self, c: &SineCoeffs) -> Field {
        let mut out = vec![0.0; self.points()];
        self.dst_inverse_into(c.as_slice(), &mut out);
        Field(out)
    }

    pub(crate) fn dst_inverse_into(&self, c: &[f64], out: &mut [f64]) {
        let m = self.points();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (i, &ci) in c.iter().enumerate() {
            if ci == 0.0 {
                continue;
            }
            let row = &self.inner.sines[i * m..(i + 1) * m];
            for (o, s) in out.iter_mut().zip(row) {
                *o += ci * s;
            }
        }
    }

    /// Same as [`Domain::dst_forward`] through an FFT of length `2(M+1)`.
    pub fn dst_forward_fast(&self, f: &Field) -> SineCoeffs {
        let raw = self.dst1(f.as_slice());
        let scale = self.spacing() * (2.0 / self.length()).sqrt();
        SineCoeffs(raw.into_iter().map(|x| x * scale).collect())
    }

    pub fn dst_inverse_fast(&self, c: &SineCoeffs) -> Field {
        let raw = self.dst1(c.as_slice());
        let scale = (2.0 / self.length()).sqrt();
        Field(raw.into_iter().map(|x| x * scale).collect())
    }

    /// Unnormalized DST-I: `X_k = sum_j x_j sin(pi j k / (M+1))`.
    fn dst1(&self, x: &[f64]) -> Vec<f64> {
        let m = self.points();
        let n = 2 * (m + 1);
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        for (j, &v) in x.iter().enumerate() {
            buf[j + 1].re = v;
            buf[n - j - 1].re = -v;
        }
        self.inner.fft.process(&mut buf);
        (1..=m).map(|k| -0.5 * buf[k].im).collect()
    }

    /// `||f||_{H^delta} = sqrt(sum_i alpha_i^delta c_i^2)`.
    pub fn sobolev_norm(&self, f: &Field, delta: SobolevIndex) -> f64 {
        self.sobolev_norm_sq(f, delta).sqrt()
    }

    pub fn sobolev_norm_sq(&self, f: &Field, delta: SobolevIndex) -> f64 {
        let c = self.dst_forward(f);
        let w = self.sobolev_weights(delta);
        c.0.iter().zip(&w).map(|(c, w)| w * c * c).sum()
    }

    /// Per-mode weights `alpha_i^delta`.
    pub fn sobolev_weights(&self, delta: SobolevIndex) -> Vec<f64> {
        let d = delta.0;
        self.weight_eigenvalues()
            .iter()
            .map(|&a| {
                if d == 0.0 {
                    1.0
                } else if d.fract() == 0.0 && d.abs() < 16.0 {
                    a.powi(d as i32)
                } else {
                    a.powf(d)
                }
            })
            .collect()
    }

    /// Three-point Dirichlet Laplacian.
    pub fn laplacian_apply(&self, f: &Field) -> Field {
        let m = self.points();
        let inv_h2 = 1.0 / (self.spacing() * self.spacing());
        let v = &f.0;
        Field(
            (0..m)
                .map(|j| {
                    let left = if j > 0 { v[j - 1] } else { 0.0 };
                    let right = if j + 1 < m { v[j + 1] } else { 0.0 };
                    (left - 2.0 * v[j] + right) * inv_h2
                })
                .collect(),
        )
    }
}

/// Grid function at the interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Field(pub Vec<f64>);

impl Field {
    pub fn new(vals: Vec<f64>) -> Result<Self> {
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("field contains non-finite values".into()));
        }
        Ok(Self(vals))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field(self.0.iter().map(|&v| f(v)).collect())
    }

    pub fn sub(&self, other: &Field) -> Field {
        Field(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn add(&self, other: &Field) -> Field {
        Field(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn scale(&self, s: f64) -> Field {
        self.map(|v| v * s)
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Coefficients against the orthonormal discrete sine vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SineCoeffs(pub Vec<f64>);

impl SineCoeffs {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobolevIndex(pub f64);

impl SobolevIndex {
    pub const L2: SobolevIndex = SobolevIndex(0.0);
    pub const H1: SobolevIndex = SobolevIndex(1.0);
    pub const H_MINUS_1: SobolevIndex = SobolevIndex(-1.0);
}

/// Thomas elimination for a tridiagonal system; `sub` and `sup` have `M-1` entries.
pub fn solve_tridiagonal(diag: &[f64], sub: &[f64], sup: &[f64], rhs: &Field) -> Result<Field> {
    let mut solver = Tridiagonal::new(diag.len());
    let mut out = vec![0.0; diag.len()];
    solver.solve(diag, sub, sup, rhs.as_slice(), &mut out)?;
    Ok(Field(out))
}

/// Reusable scratch for repeated tridiagonal solves of one size.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    c_prime: Vec<f64>,
    d_prime: Vec<f64>,
}

const PIVOT_FLOOR: f64 = 1e-14;

impl Tridiagonal {
    pub fn new(n: usize) -> Self {
        Self { c_prime: vec![0.0; n], d_prime: vec![0.0; n] }
    }

    pub fn solve(&mut self, diag: &[f64], sub: &[f64], sup: &[f64], rhs: &[f64], out: &mut [f64]) -> Result<()> {
        let n = diag.len();
        if sub.len() + 1 != n || sup.len() + 1 != n || rhs.len() != n || out.len() != n {
            return Err(Error::InvalidParameter("tridiagonal dimensions disagree".into()));
        }
        if self.c_prime.len() != n {
            *self = Self::new(n);
        }
        let mut pivot = diag[0];
        if pivot.abs() < PIVOT_FLOOR {
            return Err(Error::SingularSystem { row: 0, pivot });
        }
        self.c_prime[0] = if n > 1 { sup[0] / pivot } else { 0.0 };
        self.d_prime[0] = rhs[0] / pivot;
        for i in 1..n {
            pivot = diag[i] - sub[i - 1] * self.c_prime[i - 1];
            if pivot.abs() < PIVOT_FLOOR {
                return Err(Error::SingularSystem { row: i, pivot });
            }
            self.c_prime[i] = if i + 1 < n { sup[i] / pivot } else { 0.0 };
            self.d_prime[i] = (rhs[i] - sub[i - 1] * self.d_prime[i - 1]) / pivot;
        }
        out[n - 1] = self.d_prime[n - 1];
        for i in (0..n - 1).rev() {
            out[i] = self.d_prime[i] - self.c_prime[i] * out[i + 1];
        }
        Ok(())
    }
}
