//! Seeded generators.
//!
//! Every random draw in the crate goes through [`Rng64`], a ChaCha8 stream.
//! Independent consumers derive their own stream from the run seed so that
//! adding draws in one place never shifts the draws made elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng64 = ChaCha8Rng;

/// Generator for `seed` on the default stream.
pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for `seed` on a numbered stream.
pub fn stream(seed: u64, stream: u64) -> Rng64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used by the optimizer.
pub(crate) mod streams {
    pub const ROTATION: u64 = 1;
    pub const JITTER: u64 = 2;
    pub const PROJECTION: u64 = 3;
    pub const ADAPTIVE: u64 = 4;
}
