//! Seeded randomness.
//!
//! All randomness flows through ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded
//! from a single `u64`, which is stable across platforms and crate releases.
//! Gaussian draws use `rand_distr::StandardNormal`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::linalg::Matrix;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-purpose of a seed.
pub fn derived(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}
