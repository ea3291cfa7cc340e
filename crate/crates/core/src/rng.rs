//! Seeded, splittable random streams.
//!
//! Every stochastic operation takes a [`SeedStream`] by value. Parallel work
//! splits the stream by a deterministic index so results never depend on how
//! many threads ran them.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStream {
    pub seed: u64,
    pub stream: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Child stream `index`. Distinct indices give independent streams.
    pub fn split(&self, index: u64) -> Self {
        // splitmix64 step keeps children of different parents apart
        let mut z = self
            .stream
            .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        Self { seed: self.seed, stream: z }
    }

    pub fn rng(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_stream_same_numbers() {
        let s = SeedStream::new(7).split(3);
        let a: Vec<u64> = (0..4).map({
            let mut r = s.rng();
            move |_| r.gen()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut r = s.rng();
            move |_| r.gen()
        }).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn split_streams_differ() {
        let s = SeedStream::new(7);
        let x: u64 = s.split(0).rng().gen();
        let y: u64 = s.split(1).rng().gen();
        let z: u64 = SeedStream::new(8).split(0).rng().gen();
        assert_ne!(x, y);
        assert_ne!(x, z);
    }
}
