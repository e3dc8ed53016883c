//! Seeded randomness helpers; every stochastic choice in the crate goes
//! through a ChaCha stream so runs are reproducible bit-for-bit.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// The stream RNG used across the crate.
pub type SeededRng = ChaCha8Rng;

/// Derive an independent stream for a named sub-purpose of a run seed.
pub fn derive(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One standard normal sample (Box-Muller, always consumes two uniforms).
pub fn next_normal(rng: &mut SeededRng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Tensor with i.i.d. normal entries of the given standard deviation.
pub fn normal_tensor(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| next_normal(rng) * std).collect();
    Tensor::from_vec(shape, data).expect("shape/data agree by construction")
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut SeededRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
