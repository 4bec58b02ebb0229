//! Seeded random streams.
//!
//! Every random choice in the library flows from a single master seed
//! through named streams, so e.g. reordering training batches cannot
//! perturb parameter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives independent, reproducible RNG streams from one master seed.
#[derive(Debug, Clone, Copy)]
pub struct SeedSplitter {
    master: u64,
}

impl SeedSplitter {
    pub fn new(master: u64) -> Self {
        SeedSplitter { master }
    }

    /// A fresh deterministic RNG for the stream `name`.
    ///
    /// The stream seed is `splitmix64(master ^ fnv1a(name))`, expanded to the
    /// full 32-byte ChaCha seed; distinct names give unrelated streams.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut state = self.master ^ fnv1a64(name.as_bytes());
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_mut(8) {
            let w = splitmix64(&mut state);
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a hash of a byte string; used for config fingerprints in checkpoints.
pub fn fingerprint(bytes: &[u8]) -> u64 {
    fnv1a64(bytes)
}
