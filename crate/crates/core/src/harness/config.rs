//! JSON experiment configuration.
//!
//! Every block rejects unknown keys, so a misspelled field is an error with
//! its line and column rather than a silently ignored setting.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ergodic::EstimatorMode;
use crate::error::{Error, Result};
use crate::grid::{Domain, Spectrum};
use crate::integrators::{Correction, FaceRule, StepConfig};
use crate::model::{
    ArctanSineReaction, ConstantFriction, DiffusionSpec, FrictionSpec, ModelSpec, NoiseSpectrum, RationalFriction,
    ReactionSpec, SaturatingAmplitude,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub domain: DomainConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default = "default_mu")]
    pub mu: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_mu() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_spectrum")]
    pub spectrum: SpectrumName,
}

fn default_length() -> f64 {
    PI
}
fn default_points() -> usize {
    64
}
fn default_spectrum() -> SpectrumName {
    SpectrumName::Discrete
}

impl Default for DomainConfig {
    fn default() -> Self {
        Self { length: PI, points: 64, spectrum: SpectrumName::Discrete }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrumName {
    Discrete,
    Continuum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub friction: FrictionConfig,
    pub reaction: ReactionConfig,
    pub amplitude: AmplitudeConfig,
    pub noise: NoiseConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrictionConfig {
    Constant {
        value: f64,
    },
    /// `a + b / (1 + r^2)`.
    Rational {
        a: f64,
        b: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReactionConfig {
    Zero,
    /// `kappa arctan(r) + beta sin(pi x / L)`.
    ArctanSine {
        kappa: f64,
        beta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum AmplitudeConfig {
    Constant {
        value: f64,
    },
    /// `s0 + s1 y / sqrt(1 + y^2)`.
    Saturating {
        s0: f64,
        s1: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    /// `q_i = scale * i^-decay`, `i = 1..modes`.
    PowerLaw {
        modes: usize,
        scale: f64,
        decay: f64,
    },
    Explicit {
        q: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub epsilon: f64,
    pub face_rule: FaceRuleName,
    pub correction: CorrectionName,
    /// Wave sub-steps are chosen so that the wave step is at most `mu / wave_resolution`.
    pub wave_resolution: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            epsilon: 0.0,
            face_rule: FaceRuleName::Secant,
            correction: CorrectionName::Drift,
            wave_resolution: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceRuleName {
    Secant,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrectionName {
    Off,
    Drift,
    Pathwise,
}

impl From<CorrectionName> for Correction {
    fn from(c: CorrectionName) -> Self {
        match c {
            CorrectionName::Off => Correction::Off,
            CorrectionName::Drift => Correction::Drift,
            CorrectionName::Pathwise => Correction::Pathwise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialName {
    /// `u = 0, v = 0`.
    Zero,
    /// `u = amplitude * e_1`, `v = 0`.
    Mode,
    /// Draw the initial state of each replica from a wave stationary run.
    Stationary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Horizon of trajectory experiments.
    pub horizon: f64,
    /// Burn-in; `None` calibrates from a pilot contraction rate.
    pub burn_in: Option<f64>,
    pub spacing: Option<f64>,
    pub replicas: usize,
    /// Size of each empirical measure; a multiple of `replicas`.
    pub samples: usize,
    pub splits: usize,
    pub mode: EstimatorMode,
    /// Observation stride, in steps, for time series.
    pub observe_every: usize,
    /// Checkpoint times of the limit sweep.
    pub checkpoints: Vec<f64>,
    pub initial: InitialName,
    pub amplitude: f64,
    /// Independent paired repetitions of the correction comparison.
    pub repetitions: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            horizon: 5.0,
            burn_in: None,
            spacing: None,
            replicas: 64,
            samples: 256,
            splits: 16,
            mode: EstimatorMode::Ensemble,
            observe_every: 50,
            checkpoints: vec![0.5, 1.0, 2.0],
            initial: InitialName::Mode,
            amplitude: 2.0,
            repetitions: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical (re-serialized) document.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.domain.length > 0.0) || self.domain.points < 2 {
            return bad("domain needs length > 0 and at least 2 points");
        }
        if !(self.integrator.dt > 0.0) || !(self.integrator.epsilon >= 0.0) || !(self.integrator.wave_resolution > 0.0)
        {
            return bad("integrator needs dt > 0, epsilon >= 0 and wave_resolution > 0");
        }
        let r = &self.run;
        if r.replicas == 0 || r.samples == 0 || r.samples % r.replicas != 0 {
            return bad("run.samples must be a positive multiple of run.replicas");
        }
        if !(r.horizon > 0.0) || r.observe_every == 0 || r.splits == 0 || r.repetitions == 0 {
            return bad("run needs horizon > 0 and observe_every, splits, repetitions >= 1");
        }
        if r.burn_in.is_some_and(|b| !(b >= 0.0)) || r.spacing.is_some_and(|s| !(s > 0.0)) {
            return bad("run needs burn_in >= 0 and spacing > 0");
        }
        if self.mu.is_empty() || self.mu.iter().any(|m| !(*m > 0.0)) {
            return bad("mu must be a nonempty list of positive masses");
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<Domain> {
        let spectrum = match self.domain.spectrum {
            SpectrumName::Discrete => Spectrum::Discrete,
            SpectrumName::Continuum => Spectrum::Continuum,
        };
        Domain::with_spectrum(self.domain.length, self.domain.points, spectrum)
    }

    pub fn model(&self) -> Result<ModelSpec> {
        let dom = self.domain()?;
        let m = &self.model;
        let friction = match m.friction {
            FrictionConfig::Constant { value } => FrictionSpec::new(ConstantFriction(value)),
            FrictionConfig::Rational { a, b } => FrictionSpec::new(RationalFriction { a, b }),
        };
        let reaction = match m.reaction {
            ReactionConfig::Zero => ArctanSineReaction::zero(dom.length()),
            ReactionConfig::ArctanSine { kappa, beta } => ArctanSineReaction { kappa, beta, length: dom.length() },
        };
        let amplitude = match m.amplitude {
            AmplitudeConfig::Constant { value } => SaturatingAmplitude { s0: value, s1: 0.0 },
            AmplitudeConfig::Saturating { s0, s1 } => SaturatingAmplitude { s0, s1 },
        };
        let spectrum = match &m.noise {
            NoiseConfig::PowerLaw { modes, scale, decay } => NoiseSpectrum::power_law(*scale, *decay, *modes)?,
            NoiseConfig::Explicit { q } => NoiseSpectrum::explicit(q.clone())?,
        };
        ModelSpec::new(
            dom,
            friction,
            ReactionSpec(Arc::new(reaction)),
            DiffusionSpec { amplitude: Arc::new(amplitude), spectrum },
        )
    }

    pub fn step(&self) -> StepConfig {
        StepConfig {
            dt: self.integrator.dt,
            epsilon: self.integrator.epsilon,
            correction: self.integrator.correction.into(),
            face_rule: match self.integrator.face_rule {
                FaceRuleName::Secant => FaceRule::Secant,
                FaceRuleName::Midpoint => FaceRule::Midpoint,
            },
        }
    }

    /// Smallest mass of the sweep.
    pub fn mu_min(&self) -> f64 {
        self.mu.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {
            "friction": {"family": "rational", "a": 0.5, "b": 1.0},
            "reaction": {"family": "arctan_sine", "kappa": 0.05, "beta": 0.5},
            "amplitude": {"family": "saturating", "s0": 1.0, "s1": 0.4},
            "noise": {"family": "power_law", "modes": 16, "scale": 1.0, "decay": 1.0}
        }
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.domain.points, 64);
        assert_eq!(cfg.domain.length, PI);
        assert_eq!(cfg.integrator.dt, 1e-3);
        assert_eq!(cfg.run.samples, 256);
        assert_eq!(cfg.mu, vec![1e-1, 1e-2, 1e-3]);
        let m = cfg.model().unwrap();
        assert_eq!(m.noise_modes(), 16);
        assert!(m.hypothesis_check().passes());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let text = MINIMAL.replace("\"kappa\"", "\"kapa\"");
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("kapa") && err.contains("line 4"), "{err}");

        let text = MINIMAL.replacen('{', "{\"sed\": 1,", 1);
        let err = ExperimentConfig::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("sed"), "{err}");

        let text = MINIMAL.replace("\"model\": {", "\"run\": {\"replica\": 3}, \"model\": {");
        assert!(ExperimentConfig::from_json(&text).unwrap_err().to_string().contains("replica"));
    }

    #[test]
    fn round_trip_and_hash() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        let again = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(cfg.hash(), other.hash());
    }

    #[test]
    fn semantic_checks() {
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.run.samples = 100;
        assert!(cfg.validate().is_err());
        cfg.run.samples = 128;
        cfg.mu = vec![];
        assert!(cfg.validate().is_err());
    }
}
