//! Seed splitting.
//!
//! Every random stream in the crate is a `ChaCha8Rng` whose 64-bit seed is
//! derived from the user seed, a fixed domain tag, and an item id:
//!
//! ```text
//! key    = splitmix64(splitmix64(seed ^ domain) ^ id)
//! stream = ChaCha8Rng::seed_from_u64(key)
//! ```
//!
//! `splitmix64` is the standard finalizer (Steele, Lea & Flood):
//! add `0x9E3779B97F4A7C15`, then xor-shift-multiply by `0xBF58476D1CE4E5B9`
//! and `0x94D049BB133111EB` with shifts 30, 27, 31. Because each stream depends
//! only on `(seed, domain, id)`, per-image generation is order independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Domain tags. Changing any of these changes every generated dataset.
pub mod domain {
    pub const SCENE: u64 = 0x5343_454E;
    pub const EDIT: u64 = 0x4544_4954;
    pub const CROP: u64 = 0x4352_4F50;
    pub const HARD_NEGATIVE: u64 = 0x4852_4E47;
    pub const DATASET: u64 = 0x4441_5441;
    pub const INIT: u64 = 0x494E_4954;
    pub const BATCH: u64 = 0x4241_5443;
    pub const HELDOUT: u64 = 0x484F_4C44;
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, domain: u64, id: u64) -> u64 {
    splitmix64(splitmix64(seed ^ domain) ^ id)
}

pub fn stream(seed: u64, domain: u64, id: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, domain, id))
}
