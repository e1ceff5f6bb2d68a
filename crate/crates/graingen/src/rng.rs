//! Seeded random number generation.
//!
//! Every stochastic operation in the crate draws from a [`RunRng`] seeded
//! from the run configuration, in a fixed order, so whole runs are
//! bit-reproducible. Independent streams (e.g. one per sampling batch) are
//! derived with [`derive_seed`] so parallel and serial execution agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The deterministic generator used throughout the crate.
pub type RunRng = ChaCha8Rng;

/// Create the run generator for a seed.
pub fn run_rng(seed: u64) -> RunRng {
    RunRng::seed_from_u64(seed)
}

/// Derive an independent stream seed from a base seed and a stream index.
///
/// SplitMix64 finalizer; distinct (seed, index) pairs map to well-separated
/// stream seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard normal draw via Box-Muller.
///
/// Draws are always taken in f64 and converted by the caller, so the
/// consumed stream is identical regardless of the compute precision.
pub fn normal(rng: &mut RunRng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

/// Uniform draw in [lo, hi).
pub fn uniform(rng: &mut RunRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}
