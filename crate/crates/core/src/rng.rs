//! Seed derivation and the generator used everywhere randomness is needed.
//!
//! All streams are `Xoshiro256PlusPlus`, seeded through `seed_from_u64`
//! (SplitMix64 expansion). Independent streams for different purposes are
//! derived from one master seed by hashing `(master, purpose, index)` with
//! FNV-1a 64 followed by a SplitMix64 finalizer, so the data shuffle, the
//! weight initialization and every perturbation member draw from unrelated
//! streams while staying reproducible on every platform.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a sub-seed for `purpose` (and a numeric index within it).
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for byte in master
        .to_le_bytes()
        .iter()
        .chain(purpose.as_bytes())
        .chain(index.to_le_bytes().iter())
    {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(h)
}

pub fn stream(master: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, purpose, index))
}
