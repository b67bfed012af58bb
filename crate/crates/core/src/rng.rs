//! Seeded randomness and stable hashing.
//!
//! Every random decision in the crate flows through a ChaCha8 generator
//! derived from a root seed and a named stream, so runs are bitwise
//! reproducible across machines and resumable mid-run: the generator for
//! step `k` is a pure function of `(seed, k)`, never of how many draws
//! earlier steps consumed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels for the independent generator families.
pub mod stream {
    pub const PARAM_INIT: u64 = 0x01;
    pub const SYNTH_BLOBS: u64 = 0x02;
    pub const SYNTH_LABELS: u64 = 0x03;
    pub const PRETRAIN_BATCH: u64 = 0x04;
    pub const FINETUNE_BATCH: u64 = 0x05;
    pub const CLASSIFIER_INIT: u64 = 0x06;
    /// Per-volume seeds when synthesizing a dataset.
    pub const DATASET: u64 = 0x07;
}

/// SplitMix64 finalizer; the standard 64-bit avalanche.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for a (root, stream, index) triple.
pub fn stream_seed(root: u64, stream: u64, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(stream.wrapping_mul(0xA076_1D64_78BD_642F) ^ splitmix64(index)))
}

/// ChaCha8 generator for a derived stream.
pub fn rng_for(root: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, stream, index))
}

/// FNV-1a over bytes; stable across platforms, used for patient-id hashing
/// and dataset digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Deterministic per-voxel noise in [-1, 1), a pure function of its inputs.
pub fn hash_noise(seed: u64, z: usize, y: usize, x: usize) -> f64 {
    let k = splitmix64(
        seed ^ splitmix64((z as u64) << 42 ^ (y as u64) << 21 ^ (x as u64) ^ 0x6C62_272E_07BB_0142),
    );
    // Top 53 bits -> [0,1), then shift to [-1,1).
    let unit = (k >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    2.0 * unit - 1.0
}

/// In-place Fisher-Yates shuffle driven by the given generator.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for k in (1..items.len()).rev() {
        let j = rng.gen_range(0..=k);
        items.swap(k, j);
    }
}

/// Standard normal via Box-Muller; two uniform draws per sample.
pub fn sample_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
