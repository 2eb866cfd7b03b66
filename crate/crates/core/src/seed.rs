//! Seed derivation. Every random stream in the pipeline is a ChaCha8 stream
//! keyed by a hash of the run seed and a purpose tag, so streams never
//! depend on call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive hash of a seed and a sequence of words.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn tag(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn stream(seed: u64, purpose: &str, parts: &[u64]) -> Rng {
    let mut all = Vec::with_capacity(parts.len() + 1);
    all.push(tag(purpose));
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(mix(seed, &all))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, "tile", &[1, 2]).gen();
        let b: u64 = stream(7, "tile", &[1, 2]).gen();
        let c: u64 = stream(7, "tile", &[2, 1]).gen();
        let d: u64 = stream(7, "target", &[1, 2]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
