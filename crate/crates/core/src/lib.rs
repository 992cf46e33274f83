//! Numerical laboratory for stochastic damped wave equations with
//! state-dependent friction and their small-mass quasilinear parabolic limit.
//!
//! The crate is organized bottom-up:
//!
//! * [`grid`]: Dirichlet grid, sine transforms, Sobolev norms, tridiagonal solves.
//! * [`model`]: friction, reaction and noise coefficients and the derived limit coefficients.
//! * [`noise`]: counter-based, replayable Q-Wiener increments.
//! * [`integrators`]: time steppers for the wave system and both limit forms.
//! * [`transport`]: Wasserstein-1 distances between empirical measures of fields.
//! * [`ergodic`]: stationary sampling, moment estimates, contraction fits.
//! * [`harness`]: JSON configuration, experiment drivers, CSV and manifests.

pub mod ergodic;
pub mod error;
pub mod grid;
pub mod harness;
pub mod integrators;
pub mod model;
pub mod noise;
mod quadrature;
pub mod transport;

pub use error::{Error, Result};
pub use grid::{Domain, Field, SineCoeffs, SobolevIndex, Spectrum};
pub use integrators::{Correction, FaceRule, ParabolicState, StepConfig, WaveState};
pub use model::{HypothesisReport, ModelSpec};
pub use noise::{derive_stream, NoiseStream, WienerIncrement};
pub use transport::{EmpiricalMeasure, TransportResult};
