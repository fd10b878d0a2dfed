//! Seeded, counter-addressed random streams.
//!
//! A stream is identified by `(seed, domain, index)`, so the draws for image
//! `i` never depend on how many other images were generated first.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) mod domain {
    pub const POSES: u64 = 0x706f_7365;
    pub const CTFS: u64 = 0x6374_6673;
    pub const NOISE: u64 = 0x6e6f_6973;
    pub const PHANTOM: u64 = 0x7068_616e;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const RADEMACHER: u64 = 0x7261_6465;
}

pub(crate) fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
