//! Deterministic splittable random streams.
//!
//! Every random decision in a run (client sampling, batch draws, data
//! generation, verification probes) comes from a stream derived by mixing
//! (seed, round, client, step, purpose) into a ChaCha key. Streams with the
//! same key replay identically; streams with any differing component are
//! statistically independent. Because derivation is pure, parallel client
//! execution needs no shared RNG state and cannot affect results.

use rand::distr::uniform::{SampleRange, SampleUniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// What a stream is consumed for. Distinct purposes with otherwise equal
/// coordinates must not correlate, so the tag participates in key mixing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Server-side sampling of the participating device set.
    ClientSample,
    /// Per-step minibatch from the inner sample set.
    InnerBatch,
    /// Per-step minibatch from the outer sample set.
    OuterBatch,
    /// Synthetic shard generation.
    DataGen,
    /// Verification / oracle draws (trials, probe points).
    Probe,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::ClientSample => 1,
            Purpose::InnerBatch => 2,
            Purpose::OuterBatch => 3,
            Purpose::DataGen => 4,
            Purpose::Probe => 5,
        }
    }
}

/// A derived random stream. ChaCha12 keyed from the mixed coordinates:
/// counter-based construction, cheap to derive, stable across platforms.
pub type RngStream = ChaCha12Rng;

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the stream for (seed, round, client, step, purpose).
pub fn derive_stream(seed: u64, round: u64, client: u64, step: u64, purpose: Purpose) -> RngStream {
    let mut h = splitmix64(seed ^ 0x636f_6d66_6564_0001);
    for field in [round, client, step, purpose.tag()] {
        h = splitmix64(h ^ field);
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        h = splitmix64(h.wrapping_add(i as u64 + 1));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// `count` indices into `[0, len)` drawn uniformly with replacement.
pub fn sample_with_replacement(rng: &mut impl Rng, len: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

/// `m` distinct values from `[0, n)`, uniform without replacement, returned
/// in ascending order so downstream reductions have a fixed order.
pub fn sample_without_replacement(rng: &mut impl Rng, n: usize, m: usize) -> Vec<usize> {
    debug_assert!(m <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for t in 0..m {
        let j = rng.random_range(t..n);
        pool.swap(t, j);
    }
    let mut picked = pool[..m].to_vec();
    picked.sort_unstable();
    picked
}

/// Uniform draw helper so call sites do not need the `Rng` trait in scope.
pub fn uniform<T, R>(rng: &mut impl Rng, range: R) -> T
where
    T: SampleUniform,
    R: SampleRange<T>,
{
    rng.random_range(range)
}

/// Standard normal draw.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
