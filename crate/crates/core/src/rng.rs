//! Counter-based random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a run
//! seed, a domain tag and an index, so results never depend on the order in
//! which streams are drawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tags for independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Sample = 1,
    ParamInit = 2,
    Shuffle = 3,
    Step = 4,
    Codebook = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Returns the stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(domain as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}
