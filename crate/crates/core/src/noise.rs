//! Counter-based Q-Wiener increments.
//!
//! Every draw is a pure function of `(key, counter, index)`, where the key is
//! derived from `(seed, label, replica)`. Replaying a stream therefore only
//! needs a copy of the key and counter, which is what synchronous coupling of
//! two solvers requires.
//!
//! Key derivation, with `mix` the SplitMix64 finalizer (a bijection on u64)
//! and `fnv` the 64-bit FNV-1a hash of the label bytes:
//!
//! ```text
//! key = mix(mix(mix(seed) ^ fnv(label)) + replica * 0x9E3779B97F4A7C15)
//! ```
//!
//! Normal draws use Box-Muller on uniforms `((w >> 11) + 1) * 2^-53` in `(0, 1]`.

use std::f64::consts::TAU;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const WORD_STRIDE: u64 = 0xD1B5_4A32_D192_ED03;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3))
}

/// Per-mode Brownian increments over one step.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerIncrement {
    pub dt: f64,
    pub dw: Vec<f64>,
}

/// A replayable stream of `N_Q` independent Brownian increments per step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseStream {
    key: u64,
    counter: u64,
    modes: usize,
}

/// Stream for `(seed, label, replica)` with `modes` components per step.
pub fn derive_stream(seed: u64, label: &str, replica: u64, modes: usize) -> NoiseStream {
    NoiseStream::new(seed, label, replica, modes)
}

impl NoiseStream {
    pub fn new(seed: u64, label: &str, replica: u64, modes: usize) -> Self {
        let base = mix64(mix64(seed) ^ fnv1a(label.as_bytes()));
        let key = mix64(base.wrapping_add(replica.wrapping_mul(GOLDEN)));
        Self { key, counter: 0, modes }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Number of fine steps consumed so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Jump to an absolute step index.
    pub fn seek(&mut self, counter: u64) {
        self.counter = counter;
    }

    /// Two handles replaying the same increments.
    pub fn fork_coupled(&self) -> (NoiseStream, NoiseStream) {
        (self.clone(), self.clone())
    }

    #[inline]
    fn word(&self, step: u64, k: u64) -> u64 {
        let base = mix64(self.key ^ mix64(step.wrapping_mul(GOLDEN).wrapping_add(1)));
        mix64(base.wrapping_add(k.wrapping_add(1).wrapping_mul(WORD_STRIDE)))
    }

    #[inline]
    fn uniform(&self, step: u64, k: u64) -> f64 {
        ((self.word(step, k) >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normals for one fine step, accumulated as `out += scale * z`.
    fn accumulate_normals(&self, step: u64, scale: f64, out: &mut [f64]) {
        let mut i = 0;
        let mut pair = 0u64;
        while i < out.len() {
            let u1 = self.uniform(step, 2 * pair);
            let u2 = self.uniform(step, 2 * pair + 1);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (TAU * u2).sin_cos();
            out[i] += scale * r * c;
            if i + 1 < out.len() {
                out[i + 1] += scale * r * s;
            }
            i += 2;
            pair += 1;
        }
    }

    /// Next increment, `N(0, dt)` per mode.
    pub fn next_increment(&mut self, dt: f64) -> WienerIncrement {
        assert!(dt > 0.0, "time step must be positive");
        let mut dw = vec![0.0; self.modes];
        self.increment_into(dt, 1, &mut dw);
        WienerIncrement { dt, dw }
    }

    /// Sum of `substeps` consecutive fine increments of size `fine_dt`,
    /// written into `out`. A coarse solver uses this to stay coupled with a
    /// fine solver on the same stream.
    pub fn increment_into(&mut self, fine_dt: f64, substeps: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.modes);
        out.iter_mut().for_each(|v| *v = 0.0);
        let scale = fine_dt.sqrt();
        for _ in 0..substeps {
            self.accumulate_normals(self.counter, scale, out);
            self.counter += 1;
        }
    }
}
