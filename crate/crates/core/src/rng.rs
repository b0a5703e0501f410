//! Seeded random streams.
//!
//! Every stochastic stage takes an explicit generator. Independent streams
//! (one per chain, per training run, ...) come from the same seed with a
//! distinct ChaCha stream id, so they can be consumed in any order or in
//! parallel without changing results.

use crate::linalg::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, id: u64) -> Rng64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn standard_normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, standard_normal_vec(rng, rows * cols))
        .expect("length matches by construction")
}
