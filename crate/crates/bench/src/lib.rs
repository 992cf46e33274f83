//! Shared fixtures for the criterion benches.

use std::path::Path;

use skwsim::harness::ExperimentConfig;
use skwsim::{Domain, EmpiricalMeasure, Field, ModelSpec};

/// The shipped default config with the grid resized to `points`.
pub fn default_config(points: usize) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json");
    let mut cfg = ExperimentConfig::load(&path).expect("shipped config parses");
    cfg.domain.points = points;
    cfg
}

pub fn default_model(points: usize) -> ModelSpec {
    default_config(points).model().expect("shipped config is valid")
}

/// `n` smooth random fields, deterministic in `seed`.
pub fn random_measure(dom: &Domain, n: usize, seed: u64) -> EmpiricalMeasure {
    let mut state = seed;
    let mut next = move || {
        state = skwsim::noise::mix64(state.wrapping_add(0x9E37_79B9_7F4A_7C15));
        (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    let samples: Vec<Field> = (0..n)
        .map(|_| {
            let c: Vec<f64> = (1..=6).map(|k| next() / k as f64).collect();
            dom.sample(|x| c.iter().enumerate().map(|(k, a)| a * ((k + 1) as f64 * x).sin()).sum())
        })
        .collect();
    EmpiricalMeasure::new(dom, samples).expect("samples live on the domain")
}
