//! Deterministic random streams.
//!
//! Every random draw in the engine comes from a [`ChaCha8Rng`] seeded through
//! [`split_seed`], so a record or trial can be regenerated from its index
//! alone, independent of generation order.

pub use rand_chacha::ChaCha8Rng as Rng;
use rand::{Rng as _, SeedableRng};

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th independent stream under `master`.
pub fn split_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream(master: u64, index: u64) -> Rng {
    seeded(split_seed(master, index))
}

pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn log_uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    libm::exp(uniform(rng, libm::log(lo), libm::log(hi)))
}

pub fn coin(rng: &mut Rng) -> bool {
    rng.random::<bool>()
}

pub fn sign(rng: &mut Rng) -> f64 {
    if coin(rng) {
        1.0
    } else {
        -1.0
    }
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Standard normal draw (Box–Muller).
pub fn normal(rng: &mut Rng) -> f64 {
    let u1 = 1.0 - rng.random::<f64>();
    let u2 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}
