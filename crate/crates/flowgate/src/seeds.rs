//! Deterministic random substreams.
//!
//! All randomness in the engine flows from a single top-level `u64` seed.
//! Independent consumers (data generation, parameter init, gate noise,
//! budget sampling) draw from named substreams so that adding a consumer
//! never perturbs the draws seen by another, and so a sample's private
//! stream depends only on its identity, not on batch composition.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Substream labels. Keeping them in one enum documents every consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Synthetic data generation (one child stream per sample index).
    Data,
    /// Parameter initialization.
    Init,
    /// Gumbel gate noise (one child stream per sample seed and step).
    Gumbel,
    /// Per-batch budget `r` sampling during training.
    RSample,
    /// Training batch composition (one child stream per optimizer step).
    Batch,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x64617461,     // "data"
            Stream::Init => 0x696e6974,     // "init"
            Stream::Gumbel => 0x67756d62,   // "gumb"
            Stream::RSample => 0x72736d70,  // "rsmp"
            Stream::Batch => 0x62746368,    // "btch"
        }
    }
}

/// SplitMix64 finalizer; used to decorrelate seed material.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `(seed, stream, salt)`.
pub fn derive_seed(seed: u64, stream: Stream, salt: u64) -> u64 {
    let a = splitmix64(seed ^ splitmix64(stream.tag()));
    splitmix64(a ^ splitmix64(salt))
}

/// A seeded RNG for the given substream. ChaCha8 is portable and cheap;
/// identical inputs always yield identical draw sequences.
pub fn stream_rng(seed: u64, stream: Stream, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, salt))
}

/// A uniform draw in the open interval (0, 1).
///
/// Uses the top 53 bits of a `u64` plus a half-ulp offset so both
/// endpoints are excluded; downstream `-ln(-ln(u))` transforms therefore
/// always stay finite.
pub fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    use rand_chacha::rand_core::RngCore;
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}
