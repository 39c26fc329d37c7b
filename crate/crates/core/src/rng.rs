//! Seeded random streams.
//!
//! Every stochastic routine takes its generator explicitly. Parallel work
//! derives one independent stream per work item from a root seed and a path
//! of indices, so results do not depend on how items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream addressed by `path` under `root`.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(root), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn substream(root: u64, path: &[u64]) -> Rng {
    seeded(derive_seed(root, path))
}
