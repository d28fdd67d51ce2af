//! Seeded random streams.
//!
//! One user seed fans out into independent ChaCha streams, one per consumer,
//! so adding a dropout draw never shifts the sampler's permutation.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Consumers of randomness. The discriminant is the ChaCha stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampler = 2,
    Dropout = 3,
    Synth = 4,
    Probe = 5,
}

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, which: Stream) -> StreamRng {
    substream(seed, which, 0)
}

/// Generator for `(seed, stream, index)`, e.g. one per epoch.
pub fn substream(seed: u64, which: Stream, index: u32) -> StreamRng {
    let mut rng = StreamRng::seed_from_u64(seed);
    rng.set_stream(((which as u64) << 32) | u64::from(index));
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = stream(7, Stream::Sampler).gen();
        let b: u64 = stream(7, Stream::Sampler).gen();
        let c: u64 = stream(7, Stream::Dropout).gen();
        let d: u64 = substream(7, Stream::Sampler, 1).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
