//! Deterministic named RNG streams.
//!
//! Every source of randomness in a run is derived functionally from the root
//! seed, a stream tag, and integer indices (epoch, step, ...). Consumers never
//! share mutable RNG state, so evaluating one component cannot perturb the
//! draws of another. This is what makes resumed runs and hand-composed
//! training loops reproduce the exact trajectory of a monolithic run.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used across the crate. Kept in one place so the set of
/// independent randomness consumers is auditable.
pub mod stream {
    pub const INIT: &str = "init";
    pub const NEGATIVES: &str = "negatives";
    pub const SAMPLER: &str = "sampler";
    pub const KMEANS: &str = "kmeans";
    pub const GENERATOR: &str = "generator";
    pub const BATCH: &str = "batch";
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha8 RNG from `(root, tag, indices)`. The derivation hashes the
/// tag bytes and indices through splitmix64 so distinct keys yield independent
/// streams regardless of call order.
pub fn stream_rng(root: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut state = root ^ 0x6a09_e667_f3bc_c908;
    for chunk in tag.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        state ^= u64::from_le_bytes(word);
        splitmix64(&mut state);
    }
    for &ix in indices {
        state ^= ix.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        splitmix64(&mut state);
    }
    let mut seed = [0u8; 32];
    for word in seed.chunks_mut(8) {
        word.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
