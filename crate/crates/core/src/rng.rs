//! Reproducible random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] keyed by
//! `(root seed, purpose)` and positioned on the ChaCha stream `index`. Streams
//! for different paths, time steps or network initialisations are therefore
//! independent of scheduling and thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is mixed into the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Paths = 1,
    NetInit = 2,
    Shuffle = 3,
    Split = 4,
    Resample = 5,
    RateExperiment = 6,
    Oracle = 7,
    Test = 99,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key derived from the root seed and a purpose tag.
pub fn derive_key(seed: u64, purpose: Purpose) -> u64 {
    splitmix64(seed ^ splitmix64(purpose as u64))
}

/// Stream `index` of the `(seed, purpose)` family.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_key(seed, purpose));
    rng.set_stream(index);
    rng
}

/// Sub-seed for nested families, e.g. one path batch per training epoch.
pub fn subseed(seed: u64, purpose: Purpose, index: u64) -> u64 {
    splitmix64(derive_key(seed, purpose) ^ splitmix64(index.wrapping_add(0xA5A5)))
}
