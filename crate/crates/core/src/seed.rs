//! Hierarchical seed derivation: master → stage → item.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby integers.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a named pipeline stage.
pub fn stage_seed(master: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name
    let h = stage
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    mix(master ^ h)
}

/// Per-item seed: `stage ⊕ index`.
pub fn item_seed(stage: u64, index: u64) -> u64 {
    stage ^ index
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_by_name() {
        assert_ne!(stage_seed(7, "scene-mix"), stage_seed(7, "brir-gen"));
        assert_eq!(stage_seed(7, "scene-mix"), stage_seed(7, "scene-mix"));
        assert_eq!(item_seed(0b1010, 3), 0b1001);
    }
}
