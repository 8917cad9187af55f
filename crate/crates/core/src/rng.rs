//! Deterministic, splittable randomness.
//!
//! Every random draw in the crate is a pure function of a [`Seed`] and the
//! position of the draw in a named stream. Seeds are split by hashing in a
//! tag, so independent consumers never share a stream and adding a draw in
//! one place never shifts the draws seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    /// Child seed for an independent sub-stream identified by `tag`.
    pub fn derive(self, tag: u64) -> Seed {
        Seed(splitmix64(splitmix64(self.0) ^ splitmix64(tag.wrapping_add(0x2545_F491_4F6C_DD1D))))
    }

    /// Child seed keyed by a string label.
    pub fn derive_str(self, label: &str) -> Seed {
        // FNV-1a keeps labels stable across platforms and releases.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.derive(h)
    }

    /// Uniform draw in `[0, 1)` at a fixed index of this seed's stream.
    /// Counter based: `uniform_at(i)` does not depend on any other draw.
    pub fn uniform_at(self, index: u64) -> f64 {
        let bits = splitmix64(self.derive(index).0);
        (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Sequential generator for consumers that need many draws.
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}
