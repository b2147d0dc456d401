//! Deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha8 stream whose 64-bit seed
//! is derived from `(root seed, component label, index)`. The derivation is
//! FNV-1a over the label bytes followed by two SplitMix64 finalizer rounds,
//! so replays are identical across platforms and independent of how work is
//! scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the `index`-th stream of component `label` under `seed`.
pub fn stream_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    splitmix64(splitmix64(seed ^ h).wrapping_add(index))
}

pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, label, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = stream(7, "rollout", 3).random_iter().take(4).collect();
        let b: Vec<u64> = stream(7, "rollout", 3).random_iter().take(4).collect();
        let c: Vec<u64> = stream(7, "rollout", 4).random_iter().take(4).collect();
        let d: Vec<u64> = stream(7, "spsa", 3).random_iter().take(4).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn seed_derivation_is_pinned() {
        // Guards the documented derivation against accidental changes.
        assert_eq!(stream_seed(0, "", 0), splitmix64(splitmix64(FNV_OFFSET)));
    }
}
