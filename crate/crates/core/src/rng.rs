//! Seed derivation. Every random draw in a run descends from one global seed
//! through [`derive_seed`], so runs are reproducible from `(seed, step, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One round of SplitMix64.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers (step, volume index, stream tag).
///
/// Plain XOR of the parts would collide (`step 1, volume 0` vs `step 0,
/// volume 1`); each part is folded through SplitMix64 instead.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
