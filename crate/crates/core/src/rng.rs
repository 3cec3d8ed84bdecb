//! Seeded random streams. Every stochastic choice in the crate draws from a
//! [`Rng`] derived from a configured seed, so runs are bit-reproducible.

use rand::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::tensor::Tensor;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose, so adding draws to one component
/// never shifts the values seen by another.
pub fn stream(seed: u64, purpose: &str) -> Rng {
    // FNV-1a over the purpose tag
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seeded(seed ^ h.rotate_left(17))
}

pub fn uniform(rng: &mut Rng, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Fan-in scaled uniform init `U(-1/√fan_in, 1/√fan_in)`, marked learnable.
pub fn fan_in_uniform(rng: &mut Rng, shape: impl Into<Vec<usize>>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, shape, -bound, bound).with_requires_grad(true)
}
