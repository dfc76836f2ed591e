//! Stable seed derivation so every random stream is keyed by what it is for
//! (global seed, clip index, epoch, trajectory index) rather than by which
//! worker happens to run it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a list of keys into a base seed.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix(base), |acc, k| mix(acc ^ mix(*k)))
}

/// FNV-1a over a string, for keying streams by identifiers.
pub fn hash_str(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

pub fn rng_for(base: u64, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, keys))
}

/// Domain tags used as the first key of derived streams.
pub mod tag {
    pub const SOURCE: u64 = 1;
    pub const SYNTH: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const TRAJECTORY: u64 = 5;
    pub const TOY: u64 = 6;
    pub const PROBE: u64 = 7;
    pub const AUGMENT: u64 = 8;
}
