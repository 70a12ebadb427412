//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 stream. Independent consumers
//! (per-window prediction, per-stage training) get distinct stream ids on the
//! same seed so they can run in any order or in parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Scalar;

pub type HarRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> HarRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, stream_id: u64) -> HarRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Standard normal draws; sampled in `f64` so the sequence is identical for
/// every scalar type.
pub fn normal_vec<T: Scalar>(rng: &mut HarRng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

pub fn normal<T: Scalar>(rng: &mut HarRng) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform<T: Scalar>(rng: &mut HarRng, lo: f64, hi: f64) -> T {
    T::lit(rng.random_range(lo..hi))
}

/// Child seed: the first word of stream `child` of `seed`.
pub fn derive_seed(seed: u64, child: u64) -> u64 {
    stream(seed, child).random()
}
