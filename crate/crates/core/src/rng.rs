//! Counter-style random streams.
//!
//! A stream is identified by a master seed plus a path of task ids. Every
//! parallel task derives its own child stream, so results never depend on
//! scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream ids for the top-level modules.
pub mod module {
    pub const DRIVER: u64 = 1;
    pub const CHARACTERISTICS: u64 = 2;
    pub const MODULAR: u64 = 3;
    pub const INTEGRATE: u64 = 4;
    pub const DECOUPLED: u64 = 5;
    pub const VERIFY: u64 = 6;
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    key: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: splitmix64(seed),
        }
    }

    /// Stream for `(master seed, module id)`.
    pub fn for_module(seed: u64, module: u64) -> Self {
        Self::new(seed).child(module)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn child(&self, id: u64) -> Self {
        Self {
            seed: self.seed,
            key: splitmix64(self.key ^ splitmix64(id.wrapping_add(0x632B_E59B_D9B4_E019))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}

/// Splits `total` replicas into fixed-size batches; batch `b` uses `stream.child(b)`.
pub(crate) const BATCH: usize = 512;

pub(crate) fn batches(total: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(total.div_ceil(BATCH));
    let mut start = 0;
    while start < total {
        let len = BATCH.min(total - start);
        out.push((start, len));
        start += len;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn children_are_distinct_and_reproducible() {
        let s = RngStream::new(7);
        assert_ne!(s.child(0), s.child(1));
        assert_eq!(s.child(3), RngStream::new(7).child(3));
        let a: u64 = s.child(2).rng().random();
        let b: u64 = s.child(2).rng().random();
        assert_eq!(a, b);
    }

    #[test]
    fn batches_cover_total() {
        let b = batches(1300);
        assert_eq!(b.iter().map(|x| x.1).sum::<usize>(), 1300);
        assert_eq!(b[0], (0, BATCH));
        assert!(batches(0).is_empty());
    }
}
