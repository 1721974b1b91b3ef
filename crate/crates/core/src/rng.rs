//! Seedable random streams with deterministic, index-addressed splitting.
//!
//! A stream is identified by a 64-bit key. Sub-streams are derived from the
//! parent key and a tag path only, never from the parent's position, so a
//! sub-stream for `(sweep, unit)` is the same whether units are visited in
//! order or scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Purpose tags for sub-streams.
pub mod purpose {
    pub const INIT: u64 = 0x1;
    pub const ALLOCATE: u64 = 0x2;
    pub const POLYA_GAMMA: u64 = 0x3;
    pub const ALPHA: u64 = 0x4;
    pub const KERNEL: u64 = 0x5;
    pub const RESTART: u64 = 0x6;
    pub const SWEEP: u64 = 0x7;
    pub const SUMMARY: u64 = 0x8;
    pub const DATA: u64 = 0x9;
    pub const PRIOR: u64 = 0xA;
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    inner: Xoshiro256PlusPlus,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::from_key(splitmix(seed ^ 0x6C73_6270_5F72_6E67))
    }

    fn from_key(key: u64) -> Self {
        RngStream {
            key,
            inner: Xoshiro256PlusPlus::seed_from_u64(key),
        }
    }

    /// Derives an independent sub-stream addressed by `tags`.
    pub fn substream(&self, tags: &[u64]) -> RngStream {
        let mut key = self.key;
        for &t in tags {
            key = splitmix(key ^ splitmix(t.wrapping_add(0xA076_1D64_78BD_642F)));
        }
        Self::from_key(key)
    }

    pub fn key(&self) -> u64 {
        self.key
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
