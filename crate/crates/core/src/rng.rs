//! Counter-based seed splitting.
//!
//! Every random draw in a run is keyed by `(master seed, purpose, worker,
//! step)`. Streams are derived by hashing the key rather than by advancing a
//! shared generator, so adding a worker never shifts another worker's draws.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type StreamRng = Xoshiro256PlusPlus;

/// Purpose tags keep init, noise and probe streams disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Noise = 2,
    Probe = 3,
    Dataset = 4,
    Campaign = 5,
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key tuple into a single 64-bit stream seed.
pub fn derive_seed(master: u64, purpose: Purpose, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ (purpose as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    h = splitmix64(h ^ a.wrapping_mul(0xA076_1D64_78BD_642F));
    splitmix64(h ^ b.wrapping_mul(0xE703_7ED1_A0B4_28DB))
}

pub fn stream(master: u64, purpose: Purpose, a: u64, b: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, purpose, a, b))
}
