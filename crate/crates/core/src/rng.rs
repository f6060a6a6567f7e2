//! Seeded noise generation.
//!
//! Every independent consumer (a slice being translated, a training run)
//! owns its own ChaCha stream, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::slice::Slice;

pub type NoiseRng = ChaCha8Rng;

pub fn stream(seed: u64) -> NoiseRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Seed for slice `index` of a volume translated with `seed`.
pub fn slice_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

pub fn standard_normal(rng: &mut NoiseRng) -> f64 {
    StandardNormal.sample(rng)
}

/// A field of i.i.d. standard normal values.
pub fn gaussian_slice(rng: &mut NoiseRng, height: usize, width: usize) -> Slice {
    Slice::from_fn(height, width, |_, _| standard_normal(rng))
}

pub fn fill_gaussian(rng: &mut NoiseRng, out: &mut [f64]) {
    for v in out {
        *v = standard_normal(rng);
    }
}
