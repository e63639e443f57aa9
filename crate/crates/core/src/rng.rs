//! Seed substreams.
//!
//! One experiment seed fans out into independent generators through a
//! counter scheme: the generator for `(seed, stream, counter)` is a ChaCha8
//! stream seeded with `splitmix64(splitmix64(seed ^ stream) ^ counter)`.
//! `stream` names the consumer (prior, noise, data order, ...) and `counter`
//! is typically an iteration or epoch number, so consumers never share
//! draws and adding a consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named consumers of randomness.
pub mod stream {
    pub const PRIOR: u64 = 0x5052_494f_5200_0001;
    pub const NOISE: u64 = 0x4e4f_4953_4500_0002;
    pub const DATA_ORDER: u64 = 0x4441_5441_0000_0003;
    pub const DATASET: u64 = 0x4441_5441_5345_0004;
    pub const INIT: u64 = 0x494e_4954_0000_0005;
    pub const MIXING: u64 = 0x4d49_5849_4e47_0006;
    pub const CENTERS: u64 = 0x4345_4e54_0000_0007;
    pub const RESAMPLE: u64 = 0x5245_5341_4d50_0008;
    pub const EVAL: u64 = 0x4556_414c_0000_0009;
    pub const SPLIT: u64 = 0x5350_4c49_5400_000a;
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, counter: u64) -> u64 {
    splitmix64(splitmix64(seed ^ stream) ^ counter)
}

pub fn substream(seed: u64, stream: u64, counter: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, stream, counter))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
