//! Seeded randomness shared by every component.
//!
//! All generators are ChaCha8 (`rand_chacha`), which produces the same
//! stream on every platform. A component never draws from a root seed
//! directly; it asks for a child generator by label:
//!
//! * the 256-bit ChaCha key is expanded from the root seed with
//!   `ChaCha8Rng::seed_from_u64(root)`;
//! * the 64-bit ChaCha stream id is the FNV-1a hash of the UTF-8 label.
//!
//! Labels are `/`-separated paths such as `scene/train/3` or
//! `augment/12/0`, so two components with different labels never share a
//! stream even when they share a root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Child generator for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}

/// A derived 64-bit seed, for handing to APIs that take a seed rather than
/// a generator.
pub fn child_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    stream(seed, label).next_u64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a("a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn labels_separate_streams() {
        let a = stream(7, "scene/0").next_u64();
        let b = stream(7, "scene/1").next_u64();
        let a2 = stream(7, "scene/0").next_u64();
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }
}
