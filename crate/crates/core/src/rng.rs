//! Per-trajectory random streams.
//!
//! Each trajectory owns a ChaCha8 stream keyed by the run seed and selected by
//! the sample index, so the increments of sample `i` never depend on how
//! samples are distributed over worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Key offset separating auxiliary (bridge) draws from Gaussian increments.
const AUX_KEY: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub sample_index: u64,
}

impl RngStream {
    pub fn new(seed: u64, sample_index: u64) -> Self {
        Self { seed, sample_index }
    }

    /// Generator for the Gaussian increments of this trajectory.
    pub fn increments(&self) -> GaussianStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.sample_index);
        GaussianStream { rng }
    }

    /// Generator for auxiliary uniforms; `step` selects the draw directly, so
    /// a draw at one step never shifts the increments or later draws.
    pub fn auxiliary(&self) -> AuxiliaryStream {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ AUX_KEY);
        rng.set_stream(self.sample_index);
        AuxiliaryStream { rng }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    /// Fills `out` with independent `N(0, variance)` draws.
    pub fn fill_normal(&mut self, variance_sqrt: f64, out: &mut [f64]) {
        for o in out.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *o = variance_sqrt * z;
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuxiliaryStream {
    rng: ChaCha8Rng,
}

impl AuxiliaryStream {
    /// Uniform on `[0, 1)` attached to `(step, slot)`.
    pub fn uniform_at(&mut self, step: u64, slot: u64) -> f64 {
        // Two 32-bit words per draw, 64 slots per step.
        let word = (step.wrapping_mul(64).wrapping_add(slot % 64)).wrapping_mul(2);
        self.rng.set_word_pos(u128::from(word));
        self.rng.random::<f64>()
    }
}
