//! Seed derivation for schedule-independent random streams.
//!
//! Every parallel task draws from its own generator, seeded from the master
//! seed and the task's coordinates (replicate, resample, time point, ...).
//! Results therefore do not depend on how tasks are distributed over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream tags, so that e.g. resample 3 and time point 3 never collide.
pub mod tag {
    pub const POSTERIOR: u64 = 0x0050_535f_504f_5354;
    pub const OVERLAP: u64 = 0x004f_5645_524c_4150;
    pub const RESAMPLE: u64 = 0x5245_5341_4d50;
    pub const PPTA: u64 = 0x5050_5441;
    pub const REPLICATE: u64 = 0x5245_504c;
    pub const ORACLE: u64 = 0x4f52_4143;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of stream coordinates.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(master), |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, path))
}
