//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a splitmix64 mix of a parent seed and a stream index, so results
//! do not depend on scheduling or platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of child stream `index` under `parent`.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    splitmix64(parent ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

pub fn stream(parent: u64, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, index))
}

/// Labelled sub-streams of a master seed.
pub(crate) mod purpose {
    pub const FOLD_SEARCH: u64 = 1;
    pub const NESTED_CV: u64 = 2;
    pub const SWEEP_SEEDS: u64 = 3;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_differ_and_are_stable() {
        assert_ne!(derive_seed(7, 0), derive_seed(7, 1));
        assert_ne!(derive_seed(7, 0), derive_seed(8, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
        // pinned so a change to the mixer is caught
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
    }
}
