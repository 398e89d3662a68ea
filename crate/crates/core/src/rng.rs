//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a root seed
//! and a path of labels, so results do not depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A node in the tree of random streams. Cheap to copy; `rng()` materializes
/// the generator for this node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(splitmix64(seed ^ 0x4C44_444D))
    }

    pub fn fork(self, label: u64) -> Self {
        StreamKey(splitmix64(self.0 ^ splitmix64(label.wrapping_add(0xA5A5_5A5A))))
    }

    pub fn fork2(self, a: u64, b: u64) -> Self {
        self.fork(a).fork(b)
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// Fill `out` with standard normal draws.
pub fn fill_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Stream labels shared across modules.
pub mod label {
    pub const DATA: u64 = 1;
    pub const TIME: u64 = 2;
    pub const MASK: u64 = 3;
    pub const GAUSS: u64 = 4;
    pub const ENCODER: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const INIT: u64 = 7;
    pub const SAMPLE: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const SWD: u64 = 10;
    pub const TIME_LATENT: u64 = 11;
    pub const MASK_LATENT: u64 = 12;
}
