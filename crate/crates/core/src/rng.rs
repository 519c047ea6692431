//! Deterministic random substreams.
//!
//! Every stochastic routine in the crate takes a [`Stream`] rather than a
//! generator. A stream is a 64-bit key; children are derived from a parent
//! key and an integer label without consuming anything from the parent, so
//! work split across candidates, particles chunks or bootstrap replicates
//! draws the same numbers no matter how many threads execute it.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

/// Generator handed out by [`Stream::rng`].
pub type StreamRng = Xoshiro256PlusPlus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Stream {
    key: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self { key: mix64(seed ^ 0x6A09_E667_F3BC_C908) }
    }

    /// Child stream identified by `label`. Pure function of `(self, label)`.
    pub fn child(&self, label: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(label.wrapping_add(0x9E37_79B9_7F4A_7C15))),
        }
    }

    /// Child stream for a named stage, e.g. `"init"` or `"resample"`.
    pub fn named(&self, name: &str) -> Self {
        self.child(fnv1a64(name.as_bytes()))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> StreamRng {
        Xoshiro256PlusPlus::seed_from_u64(self.key)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
