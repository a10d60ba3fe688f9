//! Seeding helpers. Every stochastic component draws from its own ChaCha
//! stream so that, for example, action sampling never perturbs the
//! backbone's random sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type GleetRng = ChaCha8Rng;

/// Stream used by backbone dynamics (initialization, PSO/DE draws).
pub const STREAM_ENV: u64 = 0;
/// Stream used to sample actions from a policy.
pub const STREAM_POLICY: u64 = 1;

pub fn rng_for(seed: u64, stream: u64) -> GleetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer; mixes a parent seed with a tag into a new seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
