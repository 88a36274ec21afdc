//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a seed mixed from (base seed, purpose, index), so generation is
//! reproducible and order-independent across samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type LensRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a purpose tag and an index.
pub fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = splitmix(base);
    for b in tag.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(base: u64, tag: &str, index: u64) -> LensRng {
    LensRng::seed_from_u64(derive_seed(base, tag, index))
}

/// Normal sample truncated to two standard deviations.
pub fn truncated_normal(rng: &mut LensRng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn normal(rng: &mut LensRng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}
