//! Deterministic random streams.
//!
//! Two generators live here on purpose. General seeded randomness (weight
//! proposals, synthetic data, resampling) uses ChaCha8 through the `rand`
//! traits; its exact byte stream is an implementation detail. Sparsification
//! masks instead use a self-contained SplitMix64 stream keyed by
//! (seed, adapter id, tensor name), because mask bits are an external
//! contract: a mask sampled here must be reproducible from the key alone,
//! in any language, without this crate.
//!
//! Keyed-stream contract, normative:
//!
//! 1. Build the key bytes: the seed as 8 little-endian bytes, then for each
//!    string part a 0x1F separator byte followed by the part's UTF-8 bytes.
//! 2. Hash the key bytes with FNV-1a 64 (offset 0xcbf29ce484222325,
//!    prime 0x100000001b3). The digest seeds a SplitMix64 state.
//! 3. SplitMix64 step: state += 0x9e3779b97f4a7c15; z = state;
//!    z = (z ^ z >> 30) * 0xbf58476d1ce4e5b9;
//!    z = (z ^ z >> 27) * 0x94d049bb133111eb; output z ^ z >> 31.
//! 4. A unit draw takes the top 53 bits: (u64 >> 11) * 2^-53.
//!
//! Draws are consumed one per tensor element in storage order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 generator. Word-exact across platforms.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        SplitMix64 { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Stream keyed by a seed and string parts, per the module contract.
pub fn keyed_stream(seed: u64, parts: &[&str]) -> SplitMix64 {
    let mut bytes = Vec::with_capacity(8 + parts.iter().map(|p| p.len() + 1).sum::<usize>());
    bytes.extend_from_slice(&seed.to_le_bytes());
    for part in parts {
        bytes.push(0x1f);
        bytes.extend_from_slice(part.as_bytes());
    }
    SplitMix64::new(fnv1a64(&bytes))
}

/// ChaCha8 generator for everything that is not a mask contract.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
