//! Seeded random streams.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`), a
//! portable counter-based generator: the same `(seed, stream)` pair yields
//! the same sequence on every platform. Independent consumers (weight init,
//! scene synthesis, augmentation) use distinct stream ids so that adding
//! draws to one never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand::Rng;

pub type FmRng = ChaCha8Rng;

/// Stream ids reserved for the crate's consumers.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const TEACHER_BATCHES: u64 = 2;
    pub const STUDENT_BATCHES: u64 = 3;
    pub const WORLD_PALETTE: u64 = 4;
    /// Scene `i` uses stream `SCENE_BASE + i`.
    pub const SCENE_BASE: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> FmRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal draw.
pub fn normal(rng: &mut FmRng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    StandardNormal.sample(rng)
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform(rng: &mut FmRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
