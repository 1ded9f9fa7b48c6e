//! Deterministic seeding.
//!
//! Every stochastic routine takes an explicit 64-bit seed. Batched work
//! (trials, Monte Carlo chunks) derives one stream per index with
//! [`mix_seed`], so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// SplitMix64 finalizer applied to `base + (index + 1) * golden`.
///
/// This is the mixing step of SplitMix64 (Steele, Lea and Flood). Adjacent
/// indices land on statistically unrelated seeds and the map is a
/// bijection for a fixed `base`.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream for trial `index` under `base`.
pub fn trial_rng(base: u64, index: u64) -> Rng {
    rng_from_seed(mix_seed(base, index))
}
