//! Seed stream splitting.
//!
//! Every random decision in the pipeline draws from a ChaCha8 generator keyed
//! by the single user seed. Independent consumers get independent streams by
//! name: the stream id is the 64-bit FNV-1a hash of the stream name, XORed with
//! a per-use counter mixed through SplitMix64. The mapping is stable across
//! platforms and releases, so a seed fully determines a run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// K-means++ seeding and empty-cluster handling.
pub const KMEANS: &str = "kmeans";
/// Column sampling for the K-means sample set.
pub const KMEANS_SAMPLE: &str = "kmeans-sample";
/// Mining pool selection (classes and images), one counter per mining round.
pub const MINING_POOL: &str = "mining-pool";
/// Case-A coin flips inside mining, one counter per mining round.
pub const MINING_COIN: &str = "mining-coin";
/// Mini-batch shuffling, one counter per mining round.
pub const BATCHING: &str = "batching";

fn fnv1a(name: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in name.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for stream `name`, use number `counter`, under `seed`.
pub fn stream(seed: u64, name: &str, counter: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name) ^ splitmix64(counter));
    rng
}
