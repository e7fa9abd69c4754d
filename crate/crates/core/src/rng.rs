//! Seeded random streams.
//!
//! Every consumer of randomness draws from a named substream of the run's
//! master seed, so adding a new consumer never perturbs existing ones. The
//! generator is xoshiro256** seeded through SplitMix64 from
//! `master ^ fnv1a64(name)`; both are fixed, platform-independent
//! algorithms.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256StarStar as Rng;

/// 64-bit FNV-1a.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent generator for the substream `name` of `master`.
pub fn substream(master: u64, name: &str) -> Rng {
    Rng::seed_from_u64(master ^ fnv1a64(name.as_bytes()))
}
