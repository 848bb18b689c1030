//! Seed derivation. Every random draw in the crate comes from a ChaCha stream
//! keyed by the user seed plus a named purpose and a counter, so results never
//! depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes for derived streams. The discriminant is mixed into the seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Epoch = 1,
    Jitter = 2,
    VoteTies = 3,
    HocInit = 4,
    NoiseInstance = 5,
    NoiseProjection = 6,
    MonteCarlo = 7,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed, a stream purpose and a counter into a fresh 64-bit seed.
pub fn derive_seed(seed: u64, stream: Stream, counter: u64) -> u64 {
    let a = splitmix64(seed ^ splitmix64(stream as u64));
    splitmix64(a ^ splitmix64(counter.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, counter))
}
