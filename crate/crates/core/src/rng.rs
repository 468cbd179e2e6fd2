//! Deterministic seeding.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from a tuple such as `(experiment seed, drop, station)` and whose
//! stream id is the per-item counter (ray index, restart index). Work can be
//! split across threads in any way without changing a single sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep streams for different uses disjoint.
pub mod tag {
    pub const RAYS: u64 = 0x5241_5953;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const DROP: u64 = 0x4452_4f50;
    pub const EM: u64 = 0x454d_454d;
    pub const TABLE: u64 = 0x5441_424c;
    pub const SCENE: u64 = 0x5343_4e45;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed` with a splitmix64 chain.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Counter-based substream: `key` selects the generator, `stream` the counter.
pub fn substream(key: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}
