//! Counter-based random substreams.
//!
//! Every random quantity is drawn from a ChaCha stream keyed by
//! `(seed, domain)` and selected by `index`, so replicate `i` sees the same
//! numbers however the replicates are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains; keep these distinct so that e.g. calibration draws never
/// overlap replicate draws.
pub mod domain {
    pub const REPLICATE: u64 = 1;
    pub const CALIBRATION: u64 = 2;
    pub const ORACLE: u64 = 3;
    pub const RESAMPLE: u64 = 4;
    pub const BOOTSTRAP: u64 = 5;
}

// splitmix64 finalizer
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn substream(seed: u64, domain: u64, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(domain)));
    rng.set_stream(index);
    rng
}
