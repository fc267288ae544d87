//! Named, independent random streams derived from one run seed.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream so that,
//! for example, enabling the geometry probe never shifts the training
//! batch sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Split,
    Batches,
    Probe,
    Intervention,
    Null,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Split => 2,
            Stream::Batches => 3,
            Stream::Probe => 4,
            Stream::Intervention => 5,
            Stream::Null => 6,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// A sub-stream keyed by an extra counter (e.g. the probe step), so that
/// per-checkpoint draws do not depend on how many draws came before.
pub fn substream(seed: u64, which: Stream, key: u64) -> ChaCha8Rng {
    let mixed = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(mixed);
    rng.set_stream(which.id());
    rng
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: u64 = stream(5, Stream::Batches).random();
        let b: u64 = stream(5, Stream::Probe).random();
        let c: u64 = stream(5, Stream::Batches).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
        let s1: u64 = substream(5, Stream::Probe, 200).random();
        let s2: u64 = substream(5, Stream::Probe, 400).random();
        assert_ne!(s1, s2);
    }
}
