//! Seed derivation for reproducible, order-independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of stream `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// A generator for stream `index` under `master`.
pub fn stream(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index))
}

/// Salts separating independent uses of one master seed.
pub mod salt {
    pub const TRAIN_DATA: u64 = 0x7261_696e;
    pub const EVAL_HISTORIES: u64 = 0x6576_616c;
    pub const MODEL: u64 = 0x6d6f_6465;
    pub const CTF: u64 = 0x6374_6600;
    pub const ORACLE_MC: u64 = 0x6f72_6163;
}
