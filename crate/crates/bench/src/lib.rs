//! Shared inputs for the benchmarks.

use pocketlm_core::quant::{self, DType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_vec(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// A `rows x cols` matrix encoded as `dtype`.
pub fn encoded_matrix(seed: u64, rows: usize, cols: usize, dtype: DType) -> Vec<u8> {
    quant::quantize(&random_vec(seed, rows * cols), dtype).expect("whole blocks")
}
