//! Deterministic helpers shared by unit and integration tests.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Real;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::of(rng.random_range(-1.0..1.0)))
}

pub fn random_vec<T: Real>(rng: &mut ChaCha8Rng, len: usize) -> Vec<T> {
    (0..len).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()
}

/// Random symmetric positive semidefinite matrix `B Bᵀ`.
pub fn random_psd<T: Real>(rng: &mut ChaCha8Rng, n: usize) -> Array2<T> {
    let b = random_matrix::<T>(rng, n, n);
    b.dot(&b.t())
}
