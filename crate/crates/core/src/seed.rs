//! Counter-style seed derivation.
//!
//! Every random stream in an experiment is addressed by a path of integers
//! (master seed, scene, purpose, trial index, ...). The stream seed depends only
//! on that path, so results do not depend on evaluation order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of components into a single 64-bit seed.
pub fn derive(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stable 64-bit FNV-1a hash, used to turn labels into path components.
pub fn label(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng(master: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(master, path))
}

/// Purpose tags that separate independent streams inside one trial.
pub mod stream {
    pub const MESSAGE: u64 = 1;
    pub const FALSIFIED: u64 = 2;
    pub const IMAGE: u64 = 3;
    pub const CHANNEL_BOB: u64 = 4;
    pub const CHANNEL_EVE: u64 = 5;
    pub const NOISE_BOB: u64 = 6;
    pub const NOISE_EVE: u64 = 7;
    pub const POISON: u64 = 8;
    pub const CALIBRATION: u64 = 9;
}
