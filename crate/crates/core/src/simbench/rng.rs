//! Seeded random streams.
//!
//! Every replicate draws from its own ChaCha8 stream, selected by
//! `set_stream` on a generator seeded from the experiment seed. Streams are
//! independent of execution order, so replicate-level parallelism cannot
//! change results.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rand::SeedableRng;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream id for replicate `replicate` of setting `setting` under a
/// purpose tag, so data, masks and folds never share a stream.
pub fn stream_id(purpose: u8, setting: u32, replicate: u32) -> u64 {
    ((purpose as u64) << 56) | ((setting as u64) << 28) | replicate as u64
}

pub const PURPOSE_DATA: u8 = 1;
pub const PURPOSE_MASK: u8 = 2;
pub const PURPOSE_FOLD: u8 = 3;

/// Column-major matrix of independent standard normals.
pub fn standard_normal(rng: &mut impl Rng, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| StandardNormal.sample(rng))
}

/// `exp(U(ln lo, ln hi))`.
pub fn log_uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    let (a, b) = (lo.ln(), hi.ln());
    (a + (b - a) * rng.random::<f64>()).exp()
}
