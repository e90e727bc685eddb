use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent generator for `(seed, stream)`; the stream index lets separate
/// consumers of one seed draw without sharing state.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream tags used across the crate, kept in one place so that two consumers
/// never collide on the same `(seed, stream)` pair.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const TRAIN_DATA: u64 = 2;
    pub const TEST_DATA: u64 = 3;
    pub const TARGET: u64 = 4;
    pub const NOISE: u64 = 5;
    pub const FRESH: u64 = 6;
    pub const SIGNS: u64 = 7;
    pub const MONTE_CARLO: u64 = 8;
    pub const TARGET_NORMALIZE: u64 = 9;
    pub const PROBE: u64 = 10;
}
