//! Seeded random number generation.
//!
//! Every stochastic step in the toolkit draws from a ChaCha8 stream derived
//! from an explicit seed, so results are reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a sub-task (e.g. a seed per sweep cell).
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A child seed for `stream`, for configs that hand seeds to other components.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore as _;
    derive(seed, stream).next_u64()
}
